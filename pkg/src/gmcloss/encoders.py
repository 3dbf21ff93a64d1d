"""Toy feature encoders and the pairwise fusion head.

The real backbones are replaced by small learnable stand-ins: a per-video
embedding and a bag-of-tokens embedding, each pushed through affine+tanh.
Precomputed vectors can be imported instead, in which case they are fixed.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

UNK = "<unk>"
_TEXT_KIND = re.compile(r"text_(\d+)$")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = [UNK] + sorted(set(tokens) - {UNK})
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 0) for t in tokens]


def _init(rng: np.random.Generator, shape, scale=None) -> ad.Tensor:
    scale = 1.0 / np.sqrt(shape[0]) if scale is None else scale
    return ad.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


class SyntheticFeatures:
    """Learnable video and text features computed from ids and tokens."""

    mode = "synthetic"

    def __init__(self, video_ids: Sequence[str], vocab: Vocab, dim: int, seed: int = 0):
        rng = np.random.default_rng([seed, 101])
        self.dim = dim
        self.vocab = vocab
        self.video_rows = {vid: i for i, vid in enumerate(video_ids)}
        self.params = {
            "enc.video_table": _init(rng, (len(video_ids), dim), 1.0),
            "enc.token_table": _init(rng, (len(vocab), dim), 1.0),
            "enc.video_w": _init(rng, (dim, dim)),
            "enc.video_b": _init(rng, (dim,), 0.1),
            "enc.text_w": _init(rng, (dim, dim)),
            "enc.text_b": _init(rng, (dim,), 0.1),
        }

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def encode_videos(self, video_ids: Sequence[str]) -> ad.Tensor:
        p = self.params
        try:
            rows = np.array([self.video_rows[v] for v in video_ids], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"unknown video id {exc.args[0]!r}") from None
        return ad.tanh(ad.affine(p["enc.video_table"][rows], p["enc.video_w"], p["enc.video_b"]))

    def encode_texts(self, token_lists: Sequence[Sequence[str]]) -> ad.Tensor:
        p = self.params
        avg = np.zeros((len(token_lists), len(self.vocab)))
        for i, toks in enumerate(token_lists):
            for t in self.vocab.encode(toks):
                avg[i, t] += 1.0 / len(toks)
        bag = ad.Tensor(avg) @ p["enc.token_table"]
        return ad.tanh(ad.affine(bag, p["enc.text_w"], p["enc.text_b"]))

    def encode_batch(self, video_ids, caption_indices, token_lists):
        return self.encode_videos(video_ids), self.encode_texts(token_lists)


class ImportedFeatures:
    """Fixed vectors read from a features JSONL file."""

    mode = "imported"

    def __init__(self, video: dict[str, np.ndarray], text: dict[tuple[str, int], np.ndarray]):
        self.video = video
        self.text = text
        dims = {v.shape[0] for v in video.values()} | {v.shape[0] for v in text.values()}
        if len(dims) != 1:
            raise ValueError(f"imported feature vectors have inconsistent dims {sorted(dims)}")
        self.dim = dims.pop()

    @classmethod
    def load(cls, path: str | Path) -> "ImportedFeatures":
        video, text = {}, {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                vec = np.asarray(obj["vector"], dtype=np.float64)
                kind = obj["kind"]
                if kind == "video":
                    video[obj["id"]] = vec
                elif m := _TEXT_KIND.match(kind):
                    text[(obj["id"], int(m.group(1)))] = vec
                else:
                    raise ValueError(f"{path}:{lineno}: unknown feature kind {kind!r}")
        return cls(video, text)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {}

    def encode_batch(self, video_ids, caption_indices, token_lists):
        try:
            v = np.stack([self.video[vid] for vid in video_ids])
        except KeyError as exc:
            raise KeyError(f"no imported video vector for id {exc.args[0]!r}") from None
        try:
            t = np.stack([self.text[(vid, i)] for vid, i in zip(video_ids, caption_indices)])
        except KeyError as exc:
            raise KeyError(f"no imported text vector for {exc.args[0]!r}") from None
        return ad.Tensor(v), ad.Tensor(t)


class FusionHead:
    """Scores a (video, text) pair: attention over the two tokens, mean-pool, 2-layer MLP."""

    def __init__(self, dim: int, attn_dim: int | None = None, hidden: int | None = None,
                 seed: int = 0):
        rng = np.random.default_rng([seed, 202])
        attn_dim = attn_dim or dim
        hidden = hidden or attn_dim
        self.dim = dim
        self.params = {
            "fusion.wq": _init(rng, (dim, attn_dim)),
            "fusion.wk": _init(rng, (dim, attn_dim)),
            "fusion.wv": _init(rng, (dim, attn_dim)),
            "fusion.w1": _init(rng, (attn_dim, hidden)),
            "fusion.b1": _init(rng, (hidden,), 0.1),
            "fusion.w2": _init(rng, (hidden, 1)),
            "fusion.b2": ad.Tensor(np.zeros(1), requires_grad=True),
        }

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def score_pairs(self, tokens: ad.Tensor) -> ad.Tensor:
        """``tokens`` is (P, 2, d); returns the P pair scores."""
        p = self.params
        attended = ad.self_attention(tokens, p["fusion.wq"], p["fusion.wk"], p["fusion.wv"])
        pooled = ad.mean(attended, axis=1)
        hidden = ad.tanh(ad.affine(pooled, p["fusion.w1"], p["fusion.b1"]))
        return ad.reshape(ad.affine(hidden, p["fusion.w2"], p["fusion.b2"]), (-1,))


def fusion_matrix(videos: ad.Tensor, texts: ad.Tensor, head: FusionHead) -> ad.Tensor:
    """B x B matrix whose (i, j) entry is the head applied to (video_i, text_j)."""
    if videos.ndim != 2 or texts.ndim != 2 or videos.shape[1] != texts.shape[1]:
        raise ad.ShapeError(f"fusion_matrix: shapes {videos.shape} and {texts.shape} do not match")
    if videos.shape[1] != head.dim:
        raise ad.ShapeError(f"fusion head expects dim {head.dim}, got {videos.shape[1]}")
    b, m, d = videos.shape[0], texts.shape[0], videos.shape[1]
    vi = np.repeat(np.arange(b), m)
    tj = np.tile(np.arange(m), b)
    seq = ad.concat([ad.reshape(videos[vi], (-1, 1, d)), ad.reshape(texts[tj], (-1, 1, d))], axis=1)
    return ad.reshape(head.score_pairs(seq), (b, m))


def dual_cosines(videos: ad.Tensor, texts: ad.Tensor,
                 eps: float = ad.CLAMP_EPS) -> tuple[ad.Tensor, ad.Tensor]:
    """Cosine matrix between video and text rows, and the clamped angle matrix."""
    cos = ad.cosine_matrix(videos, texts)
    return cos, ad.arccos(cos, eps)
