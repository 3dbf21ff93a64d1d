"""Information-content bias extractor.

Each caption is scored by its leave-one-out CIDEr against the other captions
of the same video; each video by the mean of its caption scores. The rounded
scores are bucketed and looked up in two learnable codebooks (video side and
sentence side), whose cosine is the bias score of a (video, sentence) pair.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Caption, Corpus, VideoEntry
from .metrics import cider_vectors, tfidf

log = logging.getLogger(__name__)

CODEBOOK_DIM = 64
INIT_SCALE = 0.1
MIN_INIT_NORM = 1e-3


@dataclass(frozen=True)
class InfoContentScore:
    video_id: str
    caption_index: int
    sentence_score: float
    video_score: float

    @property
    def sentence_bucket(self) -> int:
        return sentence_bucket(self.sentence_score)

    @property
    def video_bucket(self) -> int:
        return video_bucket(self.video_score)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "caption_index": self.caption_index,
            "sentence_score": self.sentence_score,
            "video_score": self.video_score,
            "sentence_bucket": self.sentence_bucket,
            "video_bucket": self.video_bucket,
        }


def sentence_bucket(score: float) -> int:
    return int(round(round(score, 2) * 100))


def video_bucket(score: float) -> int:
    return int(round(round(score, 1) * 10))


def _locate(caption: Caption, video: VideoEntry) -> int:
    for i, c in enumerate(video.captions):
        if c is caption:
            return i
    for i, c in enumerate(video.captions):
        if c == caption:
            return i
    raise KeyError(f"caption {caption.text!r} is not part of video {video.video_id!r}")


def _loo_scores(video: VideoEntry, corpus: Corpus) -> list[float]:
    if len(video.captions) == 1:
        log.warning("video %r has a single caption; information score set to 0", video.video_id)
        return [0.0]
    vecs = [tfidf(c.tokens, corpus.df) for c in video.captions]
    return [cider_vectors(v, vecs[:i] + vecs[i + 1:]) for i, v in enumerate(vecs)]


def info_score_sentence(caption: Caption, corpus: Corpus) -> float:
    """Leave-one-out CIDEr of ``caption`` against its own video's other captions."""
    video = corpus.video(caption.video_id)
    i = _locate(caption, video)
    if len(video.captions) == 1:
        log.warning("video %r has a single caption; information score set to 0", video.video_id)
        return 0.0
    refs = [tfidf(c.tokens, corpus.df) for j, c in enumerate(video.captions) if j != i]
    return cider_vectors(tfidf(caption.tokens, corpus.df), refs)


def info_score_video(video: VideoEntry, corpus: Corpus) -> float:
    scores = _loo_scores(video, corpus)
    return round(sum(scores) / len(scores), 1)


def score_corpus(corpus: Corpus) -> list[InfoContentScore]:
    """Rounded sentence and video information scores for every caption, in corpus order."""
    out = []
    for video in corpus.videos:
        raw = _loo_scores(video, corpus)
        v_score = round(sum(raw) / len(raw), 1)
        out.extend(
            InfoContentScore(video.video_id, i, round(s, 2), v_score) for i, s in enumerate(raw)
        )
    return out


# -- histogram of information content ------------------------------------

def bucket_histogram(scores: Sequence[InfoContentScore], level: str = "sentence",
                     rank_order: str = "desc") -> list[tuple[int, int, int]]:
    """Rows of (rank, frequency, bucket).

    With ``rank_order="desc"`` buckets are ranked by descending score, so the
    rank grows as the consensus score falls (more idiosyncratic captions).
    Video-level frequencies count videos, not captions.
    """
    if level == "sentence":
        counts = Counter(s.sentence_bucket for s in scores)
    elif level == "video":
        per_video = {s.video_id: s.video_bucket for s in scores}
        counts = Counter(per_video.values())
    else:
        raise ValueError(f"unknown level {level!r}")
    if rank_order not in ("asc", "desc"):
        raise ValueError(f"unknown rank order {rank_order!r}")
    keys = sorted(counts, reverse=(rank_order == "desc"))
    return [(rank, counts[k], k) for rank, k in enumerate(keys, start=1)]


# -- codebooks and bias score ------------------------------------------------

class Codebook:
    """Lookup table from integer bucket to a learnable vector.

    Rows are created on first use. The initial value of a row depends only on
    (seed, side, bucket), so creation order never changes the result.
    """

    def __init__(self, dim: int = CODEBOOK_DIM, seed: int = 0, side: int = 0,
                 keys: Iterable[int] = ()):
        self.dim = dim
        self.seed = seed
        self.side = side
        self.rows: dict[int, int] = {}
        self.weight = ad.Tensor(np.zeros((0, dim)), requires_grad=True, name=f"codebook{side}")
        self.ensure(keys)

    def _init_row(self, key: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.side, key + 2**31])
        while True:
            v = rng.uniform(-INIT_SCALE, INIT_SCALE, self.dim)
            if np.linalg.norm(v) >= MIN_INIT_NORM:
                return v

    def ensure(self, keys: Iterable[int]) -> None:
        new = [k for k in dict.fromkeys(int(k) for k in keys) if k not in self.rows]
        if not new:
            return
        for k in new:
            self.rows[k] = len(self.rows)
        block = np.stack([self._init_row(k) for k in new])
        self.weight.data = np.concatenate([self.weight.data, block])
        self.weight.grad = np.concatenate([self.weight.grad, np.zeros_like(block)])

    def index(self, keys: Sequence[int]) -> np.ndarray:
        self.ensure(keys)
        return np.array([self.rows[int(k)] for k in keys], dtype=np.intp)

    def lookup(self, keys: Sequence[int]) -> ad.Tensor:
        return self.weight[self.index(keys)]

    def vector(self, key: int) -> np.ndarray:
        return self.weight.data[self.index([key])[0]]

    def state(self) -> dict:
        keys = sorted(self.rows, key=self.rows.get)
        return {"keys": keys, "data": self.weight.data.tolist()}

    def load_state(self, state: dict) -> None:
        self.rows = {int(k): i for i, k in enumerate(state["keys"])}
        self.weight.data = np.array(state["data"], dtype=np.float64).reshape(len(self.rows), self.dim)
        self.weight.grad = np.zeros_like(self.weight.data)


@dataclass
class BiasCodebooks:
    video: Codebook
    sentence: Codebook

    @classmethod
    def create(cls, dim: int = CODEBOOK_DIM, seed: int = 0) -> "BiasCodebooks":
        return cls(Codebook(dim, seed, side=0), Codebook(dim, seed, side=1))

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"codebook.video": self.video.weight, "codebook.sentence": self.sentence.weight}


@dataclass(frozen=True)
class BiasScore:
    y_hat: float
    xi_hat: float


def bias_score(video_bucket: int, sentence_bucket: int, codebooks: BiasCodebooks,
               eps: float = ad.CLAMP_EPS) -> BiasScore:
    u = codebooks.video.vector(video_bucket)
    v = codebooks.sentence.vector(sentence_bucket)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm codebook vector")
    y = float(np.dot(u, v) / (nu * nv))
    return BiasScore(y, math.acos(min(max(y, -1.0 + eps), 1.0 - eps)))


def bias_angles(video_buckets: Sequence[int], sentence_buckets: Sequence[int],
                codebooks: BiasCodebooks, eps: float = ad.CLAMP_EPS) -> np.ndarray:
    """Bias angles for aligned pairs, as a plain array (no gradient)."""
    u = codebooks.video.weight.data[codebooks.video.index(video_buckets)]
    v = codebooks.sentence.weight.data[codebooks.sentence.index(sentence_buckets)]
    y = (u * v).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    return np.arccos(np.clip(y, -1.0 + eps, 1.0 - eps))


def loss_b(video_buckets: Sequence[int], sentence_buckets: Sequence[int],
           codebooks: BiasCodebooks, tau1: float = 0.2) -> ad.Tensor:
    """Summed in-batch softmax loss over bias cosines; negatives are the other sentences."""
    if len(video_buckets) != len(sentence_buckets):
        raise ValueError("bucket lists must be aligned")
    b = len(video_buckets)
    if b < 2:
        raise ValueError(f"loss_b needs a batch of at least 2 pairs, got {b}")
    psi = codebooks.video.lookup(video_buckets)
    phi = codebooks.sentence.lookup(sentence_buckets)
    logits = ad.cosine_matrix(psi, phi) * (1.0 / tau1)
    logp = ad.log_softmax(logits, axis=1)
    diag = np.arange(b)
    return -ad.tsum(logp[diag, diag])
