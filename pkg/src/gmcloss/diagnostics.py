"""Finite-difference checks of every loss term at small random parameter points."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .bias import bias_angles
from .corpus import Corpus
from .encoders import dual_cosines
from .trainer import Model, TrainConfig

LOSSES = ("b", "bfcl", "mcl", "gen", "gmc")
THRESHOLD = 1e-4
BOUNDARY_GAP = 0.05
MIN_NORM = 0.2

_WORDS = "a dog cat runs jumps ball water".split()

# parameters each term reads; the summed loss is checked against all of them
PARAM_GROUPS = {
    "b": ("codebook.",),
    "bfcl": ("enc.", "fusion."),
    "mcl": ("enc.",),
    "gen": ("enc.video_", "gen."),
    "gmc": ("",),
}


def _random_corpus(rng: np.random.Generator, n_videos: int = 3, n_caps: int = 2) -> Corpus:
    data = {}
    for v in range(n_videos):
        data[f"v{v}"] = [
            " ".join(rng.choice(_WORDS, size=int(rng.integers(2, 5))))
            for _ in range(n_caps)
        ]
    return Corpus.from_dict(data)


def _away_from_kinks(model: Model, batch, xi: np.ndarray, orientation: str) -> bool:
    if len(set(batch.sentence_buckets)) < 2:
        # every bias logit identical: l_b is locally constant
        return False
    videos, texts = model.features.encode_batch(batch.video_ids, batch.caption_indices, batch.tokens)
    u = model.codebooks.video.lookup(batch.video_buckets).data
    v = model.codebooks.sentence.lookup(batch.sentence_buckets).data
    for rows in (videos.data, texts.data, u, v):
        if np.min(np.linalg.norm(rows, axis=1)) < MIN_NORM:
            return False
    cos, theta = dual_cosines(videos, texts)
    if np.max(np.abs(cos.data)) > 1.0 - BOUNDARY_GAP:
        return False
    xi_eff = xi if orientation == "literal" else math.pi - xi
    if np.min(np.abs(xi_eff - (math.pi - np.diag(theta.data)))) < BOUNDARY_GAP:
        return False
    bc = ad.cosine_matrix(ad.Tensor(u), ad.Tensor(v)).data
    return bool(np.max(np.abs(bc)) <= 1.0 - BOUNDARY_GAP)


def gradcheck_point(loss: str, seed: int, orientation: str = "literal",
                    h: float = 1e-3, order: int = 4) -> float:
    """Max relative gradient error of one loss term at a seeded random point.

    Candidate points near an arccos clamp, a margin tie or a near-zero
    vector norm are skipped by drawing the next sub-seed.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        corpus = _random_corpus(rng)
        cfg = TrainConfig(feature_dim=3, codebook_dim=3, max_caption_len=4, batch_size=3,
                          warmup_steps=0, total_steps=0, seed=int(rng.integers(2**31)),
                          margin_orientation=orientation)
        model = Model(corpus, cfg)
        params = model.parameters()
        for name, p in params.items():
            # move off the initialisation so zero-initialised weights are exercised too
            p.data = p.data + rng.normal(0.0, 0.3, p.shape)
        pairs = corpus.pairs()
        pick = rng.choice(len(pairs), size=cfg.batch_size, replace=False)
        batch = model.make_batch([pairs[i] for i in pick])
        xi = bias_angles(batch.video_buckets, batch.sentence_buckets, model.codebooks)
        if _away_from_kinks(model, batch, xi, orientation):
            break
    else:
        raise RuntimeError(f"no kink-free point found for seed {seed}")

    if loss == "gmc":
        active = {t: True for t in ("l_gen", "l_bfcl", "l_b", "l_mcl")}
    else:
        active = {t: t == f"l_{loss}" for t in ("l_gen", "l_bfcl", "l_b", "l_mcl")}

    def f():
        total, _, _ = model.forward(batch, active, xi=xi)
        return total

    checked = [p for n, p in params.items() if n.startswith(PARAM_GROUPS[loss])]
    return ad.grad_check(f, checked, h=h, order=order)


def gradcheck(losses=LOSSES, seeds=(0,), orientation: str = "literal") -> dict[str, float]:
    return {
        name: max(gradcheck_point(name, s, orientation) for s in seeds) for name in losses
    }
