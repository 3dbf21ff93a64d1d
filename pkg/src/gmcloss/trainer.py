"""Two-phase training of the loss stack on toy dual encoders.

Warm-up steps optimise l_gen + l_bfcl + l_b; afterwards l_mcl joins. The
margin for l_mcl is computed from the codebooks before each step and held
constant while differentiating, so the codebooks only learn through l_b.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .bias import BiasCodebooks, bias_angles, bias_score, loss_b, score_corpus
from .corpus import Corpus
from .encoders import FusionHead, ImportedFeatures, SyntheticFeatures, Vocab, dual_cosines, fusion_matrix
from .losses import ORIENTATIONS, TERMS, LossReport, loss_bfcl, loss_gen, loss_gmc, loss_mcl

log = logging.getLogger(__name__)

# warm-up lengths used for the full-scale datasets; toy runs use TrainConfig defaults
DATASET_WARMUP = {"msvd": 6000, "msrvtt": 14000}


@dataclass
class TrainConfig:
    tau1: float = 0.2
    tau2: float = 1.0
    tau3: float = 0.07
    codebook_dim: int = 64
    feature_dim: int = 32
    max_caption_len: int = 24
    warmup_steps: int = 300
    total_steps: int = 500
    batch_size: int = 24
    learning_rate: float = 1e-2
    momentum: float = 0.0
    seed: int = 0
    margin_orientation: str = "literal"
    freeze_bias_after_warmup: bool = False
    gen_in_warmup: bool = True
    use_gen: bool = True
    use_bfcl: bool = True
    use_b: bool = True
    use_mcl: bool = True
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    log_every: int = 50
    eval_batches: int = 4

    def __post_init__(self):
        for t in ("tau1", "tau2", "tau3"):
            if not getattr(self, t) > 0:
                raise ValueError(f"{t} must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.margin_orientation not in ORIENTATIONS:
            raise ValueError(f"margin_orientation must be one of {ORIENTATIONS}")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def active(self, phase: str) -> dict[str, bool]:
        warm = phase == "warmup"
        return {
            "l_gen": self.use_gen and (self.gen_in_warmup or not warm),
            "l_bfcl": self.use_bfcl,
            "l_b": self.use_b,
            "l_mcl": self.use_mcl and not warm,
        }


@dataclass(frozen=True)
class Batch:
    video_ids: tuple[str, ...]
    caption_indices: tuple[int, ...]
    tokens: tuple[tuple[str, ...], ...]
    video_buckets: tuple[int, ...]
    sentence_buckets: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.video_ids)


class Model:
    """All trainable pieces plus the per-caption bucket metadata of a corpus."""

    def __init__(self, corpus: Corpus, config: TrainConfig, features: ImportedFeatures | None = None):
        self.corpus = corpus
        self.config = config
        tokens = [t for v in corpus.videos for c in v.captions for t in c.tokens]
        self.vocab = Vocab(tokens)
        if features is None:
            self.features = SyntheticFeatures([v.video_id for v in corpus.videos], self.vocab,
                                              config.feature_dim, config.seed)
            dim = config.feature_dim
        else:
            self.features = features
            dim = features.dim
        self.head = FusionHead(dim, seed=config.seed)
        self.codebooks = BiasCodebooks.create(config.codebook_dim, config.seed)
        self.scores = {(s.video_id, s.caption_index): s for s in score_corpus(corpus)}
        self.codebooks.video.ensure(s.video_bucket for s in self.scores.values())
        self.codebooks.sentence.ensure(s.sentence_bucket for s in self.scores.values())
        rng = np.random.default_rng([config.seed, 303])
        self.decoder = {
            "gen.pos": ad.Tensor(rng.normal(0, 0.1, (config.max_caption_len, dim)), requires_grad=True),
            "gen.w": ad.Tensor(np.zeros((dim, len(self.vocab))), requires_grad=True),
            "gen.b": ad.Tensor(np.zeros(len(self.vocab)), requires_grad=True),
        }

    def parameters(self) -> dict[str, ad.Tensor]:
        out = dict(self.features.parameters())
        out.update(self.head.parameters())
        out.update(self.codebooks.parameters())
        out.update(self.decoder)
        return out

    def make_batch(self, pairs: Sequence[tuple[str, int]]) -> Batch:
        scores = [self.scores[p] for p in pairs]
        return Batch(
            video_ids=tuple(p[0] for p in pairs),
            caption_indices=tuple(p[1] for p in pairs),
            tokens=tuple(self.corpus.caption(*p).tokens for p in pairs),
            video_buckets=tuple(s.video_bucket for s in scores),
            sentence_buckets=tuple(s.sentence_bucket for s in scores),
        )

    def forward(self, batch: Batch, active: dict[str, bool] | None = None, xi=None):
        """Build the graph for one batch. Returns (total, report, fused matrix)."""
        cfg = self.config
        active = active or {t: True for t in TERMS}
        videos, texts = self.features.encode_batch(batch.video_ids, batch.caption_indices, batch.tokens)
        fused = fusion_matrix(videos, texts, self.head)
        terms: dict[str, ad.Tensor | None] = dict.fromkeys(TERMS)
        margins = None
        if active["l_gen"]:
            ids = [self.vocab.encode(t) for t in batch.tokens]
            terms["l_gen"] = loss_gen(videos, ids, self.decoder["gen.pos"],
                                      self.decoder["gen.w"], self.decoder["gen.b"])
        if active["l_bfcl"]:
            terms["l_bfcl"] = loss_bfcl(fused, cfg.tau2)
        if active["l_b"]:
            terms["l_b"] = loss_b(batch.video_buckets, batch.sentence_buckets, self.codebooks, cfg.tau1)
        if active["l_mcl"]:
            if xi is None:
                xi = bias_angles(batch.video_buckets, batch.sentence_buckets, self.codebooks)
            cos, theta = dual_cosines(videos, texts)
            terms["l_mcl"], margins = loss_mcl(cos, theta, xi, cfg.tau3, cfg.margin_orientation)
        total, report = loss_gmc(terms, cfg.weights, margins)
        return total, report, fused


def recall_at_1(fused: np.ndarray) -> float:
    return float(np.mean(np.argmax(fused, axis=1) == np.arange(fused.shape[0])))


# -- batching ---------------------------------------------------------------

def epoch_batches(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Seeded shuffle of ``pairs`` cut into batches of ``batch_size``.

    A trailing remainder of two or more pairs forms a short final batch; a
    single leftover pair joins the previous batch.
    """
    if len(pairs) < batch_size:
        raise ValueError(f"corpus has {len(pairs)} pairs, fewer than batch size {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def make_batches(pairs: Sequence, batch_size: int, seed: int, start: tuple[int, int] = (0, 0)
                 ) -> Iterator[tuple[tuple[int, int], list]]:
    """Endless stream of ((epoch, position), batch), starting at ``start``."""
    epoch, pos = start
    while True:
        batches = epoch_batches(pairs, batch_size, seed, epoch)
        for i in range(pos, len(batches)):
            yield (epoch, i), batches[i]
        epoch, pos = epoch + 1, 0


# -- optimisation -------------------------------------------------------------

class Optimizer:
    """Gradient descent, with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Tensor], names: Sequence[str]) -> None:
        for name in names:
            p = params[name]
            g = p.grad
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None or v.shape != g.shape else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p.data = p.data - self.lr * g


def phase_at(step: int, config: TrainConfig) -> str:
    return "warmup" if step < config.warmup_steps else "full"


def train_step(model: Model, batch: Batch, phase: str, optimizer: Optimizer) -> LossReport:
    """One update on every active parameter; returns the report computed before the update."""
    cfg = model.config
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    try:
        total, report, _ = model.forward(batch, cfg.active(phase))
    except ad.NonFiniteError as exc:
        raise FloatingPointError(f"training step produced a non-finite value: {exc}") from None
    for name in TERMS:
        if name not in report.inactive and not math.isfinite(getattr(report, name)):
            raise FloatingPointError(f"non-finite {name} in training step")
    if total.requires_grad:
        total.backward()
    names = list(params)
    if phase == "full" and cfg.freeze_bias_after_warmup:
        names = [n for n in names if not n.startswith("codebook.")]
    optimizer.step(params, names)
    return report


def evaluate(model: Model, batches: Sequence[Batch]) -> dict[str, float]:
    """Mean of every loss term (whether trained or not) and recall@1 over ``batches``."""
    sums = dict.fromkeys(TERMS + ("l_gmc", "recall_at_1"), 0.0)
    for batch in batches:
        _, report, fused = model.forward(batch)
        for t in TERMS + ("l_gmc",):
            sums[t] += getattr(report, t)
        sums["recall_at_1"] += recall_at_1(fused.data)
    return {k: v / len(batches) for k, v in sums.items()}


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    params: dict[str, np.ndarray]
    codebook_keys: dict[str, list[int]]
    velocity: dict[str, np.ndarray]
    stream: tuple[int, int]

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @classmethod
    def capture(cls, model: Model, optimizer: Optimizer, step: int, stream: tuple[int, int]):
        return cls(
            step=step,
            config=model.config,
            params={k: v.data.copy() for k, v in model.parameters().items()},
            codebook_keys={
                "video": model.codebooks.video.state()["keys"],
                "sentence": model.codebooks.sentence.state()["keys"],
            },
            velocity={k: v.copy() for k, v in optimizer.velocity.items()},
            stream=stream,
        )

    def to_json(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
        return {
            "step": self.step,
            "config": self.config.to_json(),
            "config_hash": self.config_hash,
            "params": {k: enc(v) for k, v in sorted(self.params.items())},
            "codebook_keys": self.codebook_keys,
            "velocity": {k: enc(v) for k, v in sorted(self.velocity.items())},
            "stream": list(self.stream),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        def dec(d):
            return np.array(d["data"], dtype=np.float64).reshape(d["shape"])
        config = TrainConfig.from_json(obj["config"])
        if config.hash() != obj["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return cls(
            step=obj["step"],
            config=config,
            params={k: dec(v) for k, v in obj["params"].items()},
            codebook_keys=obj["codebook_keys"],
            velocity={k: dec(v) for k, v in obj["velocity"].items()},
            stream=tuple(obj["stream"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_json(json.loads(Path(path).read_text()))

    def restore(self, model: Model, optimizer: Optimizer) -> None:
        for side in ("video", "sentence"):
            book = getattr(model.codebooks, side)
            book.load_state({"keys": self.codebook_keys[side],
                             "data": self.params[f"codebook.{side}"]})
        for name, p in model.parameters().items():
            p.data = self.params[name].copy()
            p.grad = np.zeros_like(p.data)
        optimizer.velocity = {k: v.copy() for k, v in self.velocity.items()}


# -- driver -------------------------------------------------------------------

@dataclass
class RunResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: Model


def run(config: TrainConfig, corpus: Corpus, features: ImportedFeatures | None = None,
        resume: Checkpoint | None = None, steps: int | None = None) -> RunResult:
    """Train for ``config.total_steps`` (or ``steps`` more, when resuming).

    Log rows are evaluation snapshots over a fixed set of batches, with every
    loss term computed, taken every ``log_every`` steps and at the end.
    """
    model = Model(corpus, config, features)
    optimizer = Optimizer(config.learning_rate, config.momentum)
    pairs = corpus.pairs()
    start_step, stream_pos = 0, (0, 0)
    if resume is not None:
        resume.restore(model, optimizer)
        start_step, stream_pos = resume.step, resume.stream
    end_step = config.total_steps if steps is None else start_step + steps

    eval_set = [model.make_batch(b) for b in
                epoch_batches(pairs, config.batch_size, config.seed, 0)[:config.eval_batches]]
    rows = []

    def snapshot(step: int) -> None:
        row = {"step": step, **evaluate(model, eval_set)}
        rows.append(row)
        log.info("step %d l_gmc=%.4f r@1=%.3f", step, row["l_gmc"], row["recall_at_1"])

    stream = make_batches(pairs, config.batch_size, config.seed, stream_pos)
    step = start_step
    while step < end_step:
        if (step - start_step) % config.log_every == 0:
            snapshot(step)
        _, pair_batch = next(stream)
        train_step(model, model.make_batch(pair_batch), phase_at(step, config), optimizer)
        step += 1
        stream_pos = _advance(stream_pos, len(pairs), config)
    snapshot(step)
    return RunResult(Checkpoint.capture(model, optimizer, step, stream_pos), rows, model)


def _advance(pos: tuple[int, int], n_pairs: int, config: TrainConfig) -> tuple[int, int]:
    epoch, i = pos
    n_batches = len(epoch_batches(range(n_pairs), config.batch_size, config.seed, epoch))
    return (epoch, i + 1) if i + 1 < n_batches else (epoch + 1, 0)


# -- ablation -----------------------------------------------------------------

ABLATIONS = {
    "baseline": dict(use_gen=True, use_bfcl=False, use_b=False, use_mcl=False),
    "+mcl+b": dict(use_gen=True, use_bfcl=False, use_b=True, use_mcl=True),
    "+bfcl": dict(use_gen=True, use_bfcl=True, use_b=False, use_mcl=False),
    "+gmc": dict(use_gen=True, use_bfcl=True, use_b=True, use_mcl=True),
}


def ablate(config: TrainConfig, corpus: Corpus, features: ImportedFeatures | None = None) -> list[dict]:
    rows = []
    for name, flags in ABLATIONS.items():
        cfg = dataclasses.replace(config, **flags)
        result = run(cfg, corpus, features)
        final = result.log[-1]
        rows.append({"config": name, "flags": flags, "initial": result.log[0], "final": final})
    return rows


# -- bias extractor alone -----------------------------------------------------

def train_bias_extractor(corpus: Corpus, config: TrainConfig, steps: int) -> BiasCodebooks:
    """Optimise only l_b on the corpus's bucket pairs; returns the trained codebooks."""
    scores = score_corpus(corpus)
    codebooks = BiasCodebooks.create(config.codebook_dim, config.seed)
    codebooks.video.ensure(s.video_bucket for s in scores)
    codebooks.sentence.ensure(s.sentence_bucket for s in scores)
    params = codebooks.parameters()
    optimizer = Optimizer(config.learning_rate, config.momentum)
    stream = make_batches(scores, config.batch_size, config.seed)
    for _ in range(steps):
        _, batch = next(stream)
        for p in params.values():
            p.zero_grad()
        loss = loss_b([s.video_bucket for s in batch], [s.sentence_bucket for s in batch],
                      codebooks, config.tau1)
        loss.backward()
        optimizer.step(params, list(params))
    return codebooks


def frequency_deciles(scores, codebooks: BiasCodebooks) -> dict[str, float]:
    """Mean bias score over the most and least frequent (video, sentence) bucket pairs.

    A pair's frequency is its caption count. The top group holds pairs at or
    above the 90th percentile of frequency, the bottom group pairs at or below
    the 10th; tied pairs are never split. Means are unweighted over pairs.
    """
    counts = Counter((s.video_bucket, s.sentence_bucket) for s in scores)
    pairs = sorted(counts)
    freq = np.array([counts[p] for p in pairs])
    hi, lo = np.quantile(freq, 0.9), np.quantile(freq, 0.1)
    y = np.array([bias_score(v, t, codebooks).y_hat for v, t in pairs])
    top = float(y[freq >= hi].mean())
    bottom = float(y[freq <= lo].mean())
    return {"top": top, "bottom": bottom, "gap": top - bottom,
            "n_top": int((freq >= hi).sum()), "n_bottom": int((freq <= lo).sum())}
