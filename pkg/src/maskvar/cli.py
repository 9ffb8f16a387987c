"""``maskvar`` command line: train, audit-variance, sample-masks, oracle, eval.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
plus repeatable ``--override key=value`` flags.  Keys are the fields of
:class:`~maskvar.trainer.TrainConfig`, the architecture fields of
:class:`~maskvar.encoder.EncoderConfig`, the grammar fields of
:class:`~maskvar.corpus.SyntheticGrammar`, and a few run-level keys (see
``RUN_KEYS``).  Every value is parsed against the field's type and an unknown
key or a bad value is reported with its name.

Exit codes: 0 success, 1 assertion or validation failure, 2 I/O or config
error.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import variance_lab as vl
from .checkpoint import CheckpointError
from .corpus import (
    LABEL_CHARS,
    CorpusParseError,
    SyntheticGrammar,
    TokenSequence,
    Vocabulary,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .encoder import PRESETS, EncoderConfig, EncoderParams, batch_position_losses
from .mapnet import MapNetParams, propose
from .masking import corrupt, proposal_mask, rand_mask
from .trainer import TRAIN_PRESETS, EvalSet, TrainConfig, load_models, save_checkpoint, steps_to_threshold, train

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2
SEED_ENV = "MASKVAR_SEED"
DEFAULT_SEED = 0

ENCODER_KEYS = ("max_seq_len", "num_layers", "hidden_size", "num_heads", "ffn_multiplier", "init_std", "sentence_loss")
GRAMMAR_KEYS = tuple(f.name for f in fields(SyntheticGrammar))
RUN_KEYS = {
    "preset": str,
    "corpus": str,
    "eval_corpus": str,
    "vocab": str,
    "output_dir": str,
    "num_sentences": int,
    "eval_sentences": int,
    "corpus_seed": int,
    "eval_threshold": float,
}
RUN_DEFAULTS = {"preset": "toy", "num_sentences": 5000, "eval_sentences": 256, "corpus_seed": 1234}


SCHEMA_FILES = {
    "metrics_line": "metrics_line.schema.json",
    "variance_report": "variance_report.schema.json",
    "audit_report": "audit_report.schema.json",
    "oracle_result": "oracle_result.schema.json",
    "mask_sample": "mask_sample.schema.json",
    "eval_result": "eval_result.schema.json",
    "train_summary": "train_summary.schema.json",
}


def load_schema(name: str) -> dict:
    """A shipped JSON schema by short name (see ``SCHEMA_FILES``)."""
    res = importlib.resources.files("maskvar").joinpath("schemas", SCHEMA_FILES[name])
    return json.loads(res.read_text(encoding="utf-8"))


class ConfigError(ValueError):
    """Config text or override that does not parse or validate."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_value(key: str, kind: Any, text: str):
    text = text.strip()
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "floats":
            return tuple(float(t) for t in text.split(","))
        if kind == "optional_int":
            return None if text.lower() in ("none", "") else int(text)
        return text
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} ({err})") from None


def _field_kinds() -> dict[str, Any]:
    kinds: dict[str, Any] = {}
    for f in fields(TrainConfig):
        t = str(f.type)
        if f.name == "adam_betas":
            kinds[f.name] = "floats"
        elif "None" in t:
            kinds[f.name] = "optional_int"
        else:
            kinds[f.name] = {"int": int, "float": float, "bool": bool, "str": str}[t]
    for f in fields(EncoderConfig):
        if f.name in ENCODER_KEYS:
            kinds[f.name] = {"int": int, "float": float, "str": str}[str(f.type)]
    for f in fields(SyntheticGrammar):
        kinds[f.name] = "floats" if f.name == "weights" else {"int": int, "float": float}[str(f.type)]
    kinds.update(RUN_KEYS)
    return kinds


KINDS = _field_kinds()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


@dataclass
class RunConfig:
    train: TrainConfig
    encoder: dict
    grammar: SyntheticGrammar
    run: dict = field(default_factory=dict)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, dropout=self.train.dropout, **self.encoder)

    def to_dict(self) -> dict:
        g = {f.name: getattr(self.grammar, f.name) for f in fields(SyntheticGrammar)}
        g["weights"] = list(g["weights"])
        return {"train": self.train.to_dict(), "encoder": dict(self.encoder), "grammar": g, "run": dict(self.run)}


def build_run_config(raw: dict[str, str], seed: int | None = None) -> RunConfig:
    """Typed RunConfig from raw strings; ``seed`` (already resolved) wins over the file."""
    values = {}
    for key, text in raw.items():
        if key not in KINDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, KINDS[key], text)
    run = {**RUN_DEFAULTS, **{k: values.pop(k) for k in list(values) if k in RUN_KEYS}}
    if run["preset"] not in PRESETS:
        raise ConfigError(f"config key 'preset': unknown preset {run['preset']!r} (choose from {', '.join(PRESETS)})")
    encoder = {**PRESETS[run["preset"]], **{k: values.pop(k) for k in list(values) if k in ENCODER_KEYS}}
    grammar_kw = {k: values.pop(k) for k in list(values) if k in GRAMMAR_KEYS}
    train_kw = {**TRAIN_PRESETS[run["preset"]], **values}
    if seed is not None:
        train_kw["seed"] = seed
    try:
        grammar = SyntheticGrammar(**grammar_kw)
    except ValueError as err:
        raise ConfigError(f"grammar: {err}") from None
    try:
        tc = TrainConfig(**train_kw)
    except ValueError as err:
        raise ConfigError(f"train config: {err}") from None
    for key in ("num_sentences", "eval_sentences"):
        if run[key] < 0:
            raise ConfigError(f"config key {key!r}: must be non-negative")
    return RunConfig(tc, encoder, grammar, run)


def resolve_seed(flag: int | None, raw: dict[str, str] | None = None) -> int | None:
    """``--seed`` flag, else ``$MASKVAR_SEED``; None when neither applies.

    A ``seed`` key in the config outranks the environment, so its presence
    also returns None and the key itself is parsed with the other fields.
    """
    if flag is not None:
        return flag
    if raw and "seed" in raw:
        return None
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return None


def _seed_for(args) -> int:
    seed = resolve_seed(args.seed)
    return DEFAULT_SEED if seed is None else seed


def load_run_config(path: str | None, overrides: Sequence[str], seed_flag: int | None) -> RunConfig:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            raw = parse_config_text(Path(path).read_text(encoding="utf-8"), path)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value
    return build_run_config(raw, resolve_seed(seed_flag, raw))


# -- corpora ------------------------------------------------------------------


def synthetic_corpora(grammar: SyntheticGrammar, num_train: int, num_eval: int, corpus_seed: int):
    """Train and held-out sentences from independent children of ``corpus_seed``."""
    train_ss, eval_ss = np.random.SeedSequence(corpus_seed).spawn(2)
    return (
        generate_corpus(grammar, num_train, np.random.default_rng(train_ss)),
        generate_corpus(grammar, num_eval, np.random.default_rng(eval_ss)),
    )


def _check_vocab(corpus: Sequence[TokenSequence], vocab_size: int, what: str):
    for i, x in enumerate(corpus):
        if len(x) and int(x.tokens.max()) >= vocab_size:
            raise ConfigError(f"{what}: sentence {i} uses token ids beyond the model vocabulary ({vocab_size})")


def corpus_for_model(path: str | None, encoder: EncoderParams, limit: int | None, grammar=None, seed: int = 1234):
    """Sentences from ``path`` (vocabulary from its sidecar) or the default grammar's held-out set."""
    if path is not None:
        corpus, _ = load_corpus(path)
    else:
        grammar = grammar or SyntheticGrammar()
        _, corpus = synthetic_corpora(grammar, 0, max(limit or 0, 256), seed)
    _check_vocab(corpus, encoder.config.vocab_size, "corpus")
    if limit is not None:
        corpus = corpus[:limit]
    too_long = [i for i, x in enumerate(corpus) if len(x) > encoder.config.max_seq_len]
    if too_long:
        raise ConfigError(f"corpus: sentence {too_long[0]} is longer than max_seq_len {encoder.config.max_seq_len}")
    return corpus


def _write_json(obj, path: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed)
    if args.baseline_uniform:
        cfg.train = replace(cfg.train, mode="uniform")
    out = Path(args.output or cfg.run.get("output_dir") or "maskvar_run")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.run.get("corpus"):
        corpus, vocab = load_corpus(cfg.run["corpus"], cfg.run.get("vocab"))
        eval_corpus = load_corpus(cfg.run["eval_corpus"], vocab)[0] if cfg.run.get("eval_corpus") else []
    else:
        vocab = cfg.grammar.vocabulary()
        corpus, eval_corpus = synthetic_corpora(
            cfg.grammar, cfg.run["num_sentences"], cfg.run["eval_sentences"], cfg.run["corpus_seed"]
        )
        save_corpus(corpus, vocab, out / "corpus.txt")
        save_corpus(eval_corpus, vocab, out / "eval.txt")
    enc_cfg = cfg.encoder_config(len(vocab))
    for what, c in (("corpus", corpus), ("eval_corpus", eval_corpus)):
        if any(len(x) > enc_cfg.max_seq_len for x in c):
            raise ConfigError(f"{what}: sentences longer than max_seq_len {enc_cfg.max_seq_len}")
        if any(len(x) == 0 for x in c):
            raise ConfigError(f"{what}: empty sentence")
    if cfg.train.total_steps > 0 and not corpus:
        raise ConfigError("corpus: no sentences to train on")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    state, history = train(cfg.train, corpus, enc_cfg, eval_corpus, output_dir=out)
    save_checkpoint(out / "final.mvar", state, cfg.train)
    curve = [(m.step, m.eval_loss) for m in history if m.eval_loss is not None]
    tau = cfg.run.get("eval_threshold")
    summary = {
        "steps": state.step,
        "seed": cfg.train.seed,
        "mode": cfg.train.mode,
        "final_eval_loss": curve[-1][1] if curve else None,
        "eval_threshold": tau,
        "steps_to_threshold": None if tau is None else steps_to_threshold(history, tau),
        "final_checkpoint": "final.mvar",
    }
    _write_json(summary, str(out / "summary.json"))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- audit-variance -----------------------------------------------------------


def _mapnet_proposal(mapnet: MapNetParams):
    return lambda x: propose(mapnet, x).probs


def audit_exact(encoder, mapnet, corpus, K, names, clip_eps=None, threads=1) -> dict:
    tables = [vl.gradient_table(encoder, x, K, threads=threads) for x in corpus]
    reports = {}
    for name in names:
        groups = []
        for x, t in zip(corpus, tables):
            if name == "uniform":
                groups.append((t.base_probs, t.values))
            elif name == "mapnet":
                q, r = vl.importance_weights(t, propose(mapnet, x).probs, clip_eps=clip_eps)
                groups.append((q, r[:, None] * t.values))
            else:
                q, r = vl.importance_weights(t, subset_probs=vl.optimal_subset_proposal(t))
                groups.append((q, r[:, None] * t.values))
        rep = vl.decompose(groups)
        rep.meta = {"mode": "exact", "K": K, "sentences": len(corpus), "proposal": name}
        reports[name] = rep
    return reports


def audit_mc(encoder, mapnet, corpus, K, names, samples, seed, clip_eps=None) -> dict:
    reports = {}
    for name in names:
        if name == "optimal":
            raise ConfigError("the optimal subset proposal needs enumeration; use --mode exact")
        proposal = None if name == "uniform" else _mapnet_proposal(mapnet)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0D1]))
        rep = vl.mc_variance_decomposition(corpus, encoder, K, proposal, samples, rng, clip_eps=clip_eps)
        rep.meta["proposal"] = name
        reports[name] = rep
    return reports


def compare_mask_terms(base: vl.VarianceReport, other: vl.VarianceReport) -> dict:
    out = {
        "ratio": other.mask_term / base.mask_term if base.mask_term > 0 else None,
        "gap": base.mask_term - other.mask_term,
    }
    if base.mask_term_stderr is not None and other.mask_term_stderr is not None:
        se = math.hypot(base.mask_term_stderr, other.mask_term_stderr)
        out["combined_stderr"] = se
        out["gap_in_stderr"] = out["gap"] / se if se > 0 else None
    return out


def cmd_audit_variance(args) -> int:
    seed = _seed_for(args)
    encoder, mapnet = load_models(args.checkpoint)
    names = [s.strip() for s in args.proposals.split(",") if s.strip()]
    bad = [n for n in names if n not in ("uniform", "mapnet", "optimal")]
    if bad or not names:
        raise ConfigError(f"--proposals: unknown proposal {bad[0] if bad else ''!r}")
    if "mapnet" in names and mapnet is None:
        raise ConfigError("checkpoint has no MAP-Net; drop 'mapnet' from --proposals")
    corpus = corpus_for_model(args.corpus, encoder, args.sentences, seed=args.corpus_seed)
    if args.mode == "exact":
        if args.K is None:
            raise ConfigError("--mode exact needs --K")
        try:
            reports = audit_exact(encoder, mapnet, corpus, args.K, names, args.clip_eps, args.threads)
        except vl.EnumerationCapError as err:
            print(f"error: {err}. Use --mode mc for long sentences.", file=sys.stderr)
            return EXIT_FAIL
    else:
        reports = audit_mc(encoder, mapnet, corpus, args.K, names, args.samples, seed, args.clip_eps)
    doc = {
        "summary": vl.VARIANCE_SUMMARY,
        "mode": args.mode,
        "K": args.K,
        "seed": seed,
        "sentences": len(corpus),
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "comparisons": {
            f"{n}_vs_uniform": compare_mask_terms(reports["uniform"], reports[n])
            for n in reports
            if n != "uniform" and "uniform" in reports
        },
    }
    _write_json(doc, args.output)
    return EXIT_OK


# -- sample-masks -------------------------------------------------------------


def cmd_sample_masks(args) -> int:
    seed = _seed_for(args)
    encoder, mapnet = load_models(args.checkpoint)
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    if mapnet is None and not args.uniform:
        raise ConfigError("checkpoint has no MAP-Net; pass --uniform")
    lines = []
    if args.count:
        corpus = corpus_for_model(args.corpus, encoder, None, seed=args.corpus_seed)
        vocab = Vocabulary.load(args.vocab) if args.vocab else None
        mask_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A4D]))
        for i in range(args.count):
            x = corpus[i % len(corpus)]
            if args.uniform:
                probs = np.full(len(x), 1.0 / len(x))
                plan = rand_mask(x, args.mask_rate, mask_rng)
            else:
                probs = propose(mapnet, x).probs
                plan = proposal_mask(x, probs, args.mask_rate, args.clip_eps, mask_rng)
            _, plan.actions = corrupt(x, plan.positions, mask_rng, encoder.config.vocab_size, return_actions=True)
            lines.append(
                json.dumps(
                    {
                        "index": i,
                        "sentence": i % len(corpus),
                        "tokens": vocab.decode(x.tokens) if vocab else [int(t) for t in x.tokens],
                        "labels": None if x.labels is None else "".join(LABEL_CHARS[l] for l in x.labels),
                        "proposal": [float(p) for p in probs],
                        "plan": plan.to_dict(),
                    },
                    sort_keys=True,
                )
            )
    text = "".join(line + "\n" for line in lines)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- oracle -------------------------------------------------------------------


def oracle_fixture(seed: int, n: int = 6, num: int = 3):
    """Tiny corpus of length-``n`` sentences and an untrained toy encoder (no dropout)."""
    grammar = SyntheticGrammar(min_len=n, max_len=n)
    corpus = generate_corpus(grammar, num, np.random.default_rng(np.random.SeedSequence([seed, 0xF1])))
    vocab_size = len(grammar.vocabulary())
    params = EncoderParams.init(
        EncoderConfig(vocab_size, dropout=0.0, **PRESETS["toy"]), np.random.default_rng(np.random.SeedSequence([seed, 0xF2]))
    )
    return corpus, params


def _check(name, passed, value=None, threshold=None, informational=False):
    return {
        "name": name,
        "passed": bool(passed),
        "value": value,
        "threshold": threshold,
        "informational": informational,
    }


def oracle_decomposition(seed: int, **_) -> list[dict]:
    corpus, params = oracle_fixture(seed)
    rep = vl.exact_variance_decomposition(corpus, params, 2)
    rel = abs(rep.residual) / rep.total
    single = vl.exact_variance_decomposition(corpus[:1], params, 2)
    full = vl.exact_variance_decomposition(corpus[:1], params, 6)
    return [
        _check("residual_relative", rel <= 1e-10, rel, 1e-10),
        _check("terms_nonnegative", min(rep.mask_term, rep.sentence_term) >= -1e-12, min(rep.mask_term, rep.sentence_term), -1e-12),
        _check("single_sentence_sentence_term_zero", single.sentence_term == 0.0, single.sentence_term, 0.0),
        _check("K_equals_n_mask_term_zero", full.mask_term == 0.0, full.mask_term, 0.0),
    ]


def oracle_unbiasedness(seed: int, clip_eps: float | None = None, **_) -> list[dict]:
    corpus, params = oracle_fixture(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF3]))
    table = vl.gradient_table(params, corpus[0], 2)
    dev = max(vl.importance_estimator_audit(table, proposal=rng.dirichlet(np.ones(6))).deviation for _ in range(10))
    checks = [
        _check("uniform_deviation_zero", vl.importance_estimator_audit(table).deviation == 0.0, 0.0, 0.0),
        _check("max_deviation_unclipped", dev <= 1e-10, dev, 1e-10),
    ]
    if clip_eps is not None:
        skewed = np.array([0.5, 0.2, 0.1, 0.1, 0.05, 0.05])
        bias = vl.importance_estimator_audit(table, proposal=skewed, clip_eps=clip_eps).deviation
        checks.append(_check("clipped_bias", True, bias, 1e-10, informational=True))
    return checks


def oracle_optimality(seed: int, **_) -> list[dict]:
    corpus, params = oracle_fixture(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF4]))
    table = vl.gradient_table(params, corpus[0], 2)
    v_opt = vl.proposal_variance(table, subset_probs=vl.optimal_subset_proposal(table))
    v_uni = vl.proposal_variance(table)
    v_rand = min(vl.proposal_variance(table, subset_probs=rng.dirichlet(np.ones(table.size))) for _ in range(20))
    toy = vl.scalar_table(6, 2, rng.uniform(0.5, 2.0, 15))
    v_toy = vl.proposal_variance(toy, subset_probs=vl.optimal_subset_proposal(toy))
    return [
        _check("optimal_le_uniform", v_opt <= v_uni + 1e-8, v_opt - v_uni, 1e-8),
        _check("optimal_le_dirichlet", v_opt <= v_rand + 1e-8, v_opt - v_rand, 1e-8),
        _check("scalar_toy_zero_variance", v_toy <= 1e-20, v_toy, 1e-20),
    ]


def oracle_correlation(seed: int, checkpoint: str | None = None, **_) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF5]))
    a = rng.uniform(0.1, 5.0, 50)
    exact = vl.correlation_from_pairs(a, 3.0 * a).pearson
    try:
        vl.correlation_from_pairs(np.ones(40), a[:40])
        degenerate = False
    except vl.DegenerateError:
        degenerate = True
    checks = [
        _check("proportional_pairs_pearson_one", abs(exact - 1.0) <= 1e-12, exact, 1.0),
        _check("constant_series_rejected", degenerate),
    ]
    if checkpoint is None:
        corpus, params = oracle_fixture(seed, n=12, num=4)
        r = vl.loss_norm_correlation(corpus, params)
        checks.append(_check("untrained_pearson", True, r.pearson, None, informational=True))
    else:
        encoder, _ = load_models(checkpoint)
        corpus = corpus_for_model(None, encoder, 16)
        r = vl.loss_norm_correlation(corpus, encoder)
        checks.append(_check("trained_pearson", r.pearson > 0.5, r.pearson, 0.5))
    return checks


ORACLES = {
    "decomposition": oracle_decomposition,
    "unbiasedness": oracle_unbiasedness,
    "optimality": oracle_optimality,
    "correlation": oracle_correlation,
}


def cmd_oracle(args) -> int:
    seed = _seed_for(args)
    suites = list(ORACLES) if args.suite == "all" else [args.suite]
    results = {}
    for suite in suites:
        checks = ORACLES[suite](seed, clip_eps=args.clip_eps, checkpoint=args.checkpoint)
        results[suite] = {"passed": all(c["passed"] for c in checks), "checks": checks}
    passed = all(r["passed"] for r in results.values())
    _write_json({"seed": seed, "passed": passed, "suites": results}, args.output)
    for suite, r in results.items():
        for c in r["checks"]:
            if not c["passed"]:
                print(f"FAILED {suite}.{c['name']}: value={c['value']} threshold={c['threshold']}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


# -- eval ---------------------------------------------------------------------


def evaluate(encoder: EncoderParams, corpus: Sequence[TokenSequence], seed: int, mask_rate: float = 0.15) -> dict:
    """Held-out MLM loss with fixed seeded masks, plus mean loss per difficulty class."""
    evalset = EvalSet.build(corpus, mask_rate, encoder.config.vocab_size, seed)
    per_class: dict[str, list[float]] = {c: [] for c in LABEL_CHARS}
    start = 0
    for mb, positions, targets in evalset.batches:
        losses = batch_position_losses(encoder, mb.tokens, mb.lengths, positions, targets).data
        k = 0
        for b, pos in enumerate(positions):
            x = corpus[start + b]
            if x.labels is not None:
                for p in pos:
                    per_class[LABEL_CHARS[x.labels[p]]].append(float(losses[k]))
                    k += 1
            else:
                k += len(pos)
        start += len(positions)
    names = {"F": "FUNCTION", "C": "CONTENT", "N": "NOISE"}
    return {
        "eval_loss": evalset.loss(encoder),
        "sentences": len(corpus),
        "per_class": {names[c]: (float(np.mean(v)) if v else None) for c, v in per_class.items()},
    }


def cmd_eval(args) -> int:
    seed = _seed_for(args)
    encoder, _ = load_models(args.checkpoint)
    corpus = corpus_for_model(args.corpus, encoder, args.sentences, seed=args.corpus_seed)
    doc = evaluate(encoder, corpus, seed, args.mask_rate)
    doc["seed"] = seed
    _write_json(doc, args.output)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskvar", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", type=int, default=1, help="cap BLAS/worker threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--seed", type=int, default=None, help=f"random seed (fallback ${SEED_ENV}, then {DEFAULT_SEED})")
        p.add_argument("--output", default=None, help="output file (default stdout)")
        if corpus:
            p.add_argument("--corpus", default=None, help="corpus text file (default: synthetic held-out set)")
            p.add_argument("--corpus-seed", type=int, default=RUN_DEFAULTS["corpus_seed"])

    p = sub.add_parser("train", help="joint encoder / MAP-Net training")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--baseline-uniform", action="store_true", help="pin explore_p=1.0 (plain uniform masking)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="run directory (default: output_dir key or ./maskvar_run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit-variance", help="mask/sentence variance split for uniform, MAP-Net and optimal proposals")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--K", type=int, default=None, help="masked positions per sentence (mc default: 15%% of length)")
    p.add_argument("--mode", choices=("exact", "mc"), default="mc")
    p.add_argument("--samples", type=int, default=64, help="mask samples per sentence (mc)")
    p.add_argument("--sentences", type=int, default=32)
    p.add_argument("--proposals", default="uniform,mapnet", help="comma list of uniform, mapnet, optimal")
    p.add_argument("--clip-eps", type=float, default=None, help="clip ratios (biased; default unclipped)")
    p.set_defaults(func=cmd_audit_variance)

    p = sub.add_parser("sample-masks", help="JSONL of sampled mask plans")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--vocab", default=None, help="vocabulary file to print token strings")
    p.add_argument("--uniform", action="store_true", help="uniform masking instead of the MAP-Net")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.set_defaults(func=cmd_sample_masks)

    p = sub.add_parser("oracle", help="enumeration checks of the variance identities")
    p.add_argument("suite", choices=(*ORACLES, "all"))
    common(p, corpus=False)
    p.add_argument("--clip-eps", type=float, default=None, help="also report the clipping bias (informational)")
    p.add_argument("--checkpoint", default=None, help="trained checkpoint for the correlation threshold")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="held-out MLM loss, overall and per difficulty class")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--sentences", type=int, default=None)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_IO
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, CorpusParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (OSError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError, AssertionError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
