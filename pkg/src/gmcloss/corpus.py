"""Caption corpus ingestion, tokenization and n-gram document frequencies."""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

N_MAX = 4

_PUNCT = string.punctuation


class CorpusError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip ASCII punctuation from each token."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


def ngrams(tokens: list[str], n: int) -> Counter:
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class Caption:
    video_id: str
    text: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, video_id: str, text: str) -> "Caption":
        return cls(video_id, text, tuple(tokenize(text)))


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    captions: tuple[Caption, ...]


@dataclass
class DfTable:
    """Per-video document frequency of every n-gram, n = 1..n_max."""

    num_videos: int
    n_max: int = N_MAX
    df: dict[tuple[int, tuple[str, ...]], int] = field(default_factory=dict)

    def __getitem__(self, key: tuple[int, tuple[str, ...]]) -> int:
        return self.df.get(key, 0)

    def to_json(self) -> dict:
        rows = [
            {"n": n, "ngram": " ".join(gram), "df": count}
            for (n, gram), count in sorted(self.df.items())
        ]
        return {"num_videos": self.num_videos, "n_max": self.n_max, "df": rows}


class Corpus:
    """Immutable collection of videos with the document-frequency table built over them."""

    def __init__(self, videos: Iterable[VideoEntry], n_max: int = N_MAX):
        self.videos: tuple[VideoEntry, ...] = tuple(videos)
        self.n_max = n_max
        self._index: dict[str, int] = {}
        for i, v in enumerate(self.videos):
            if v.video_id in self._index:
                raise CorpusError(f"duplicate video_id {v.video_id!r}")
            if not v.captions:
                raise CorpusError(f"video {v.video_id!r} has no captions")
            for c in v.captions:
                if c.video_id != v.video_id:
                    raise CorpusError(
                        f"caption video_id {c.video_id!r} does not match entry {v.video_id!r}")
            self._index[v.video_id] = i
        self.df = self._count_df()

    def _count_df(self) -> DfTable:
        df: Counter = Counter()
        for video in self.videos:
            seen = set()
            for cap in video.captions:
                for n in range(1, self.n_max + 1):
                    seen.update((n, g) for g in ngrams(list(cap.tokens), n))
            df.update(seen)
        return DfTable(num_videos=len(self.videos), n_max=self.n_max, df=dict(df))

    @classmethod
    def from_dict(cls, mapping: dict[str, list[str]], n_max: int = N_MAX) -> "Corpus":
        return cls(
            (VideoEntry(vid, tuple(Caption.from_text(vid, t) for t in caps))
             for vid, caps in mapping.items()),
            n_max=n_max,
        )

    def __len__(self) -> int:
        return len(self.videos)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._index

    def video(self, video_id: str) -> VideoEntry:
        try:
            return self.videos[self._index[video_id]]
        except KeyError:
            raise KeyError(f"video_id {video_id!r} not in corpus") from None

    def video_index(self, video_id: str) -> int:
        return self._index[video_id]

    def pairs(self) -> list[tuple[str, int]]:
        """All (video_id, caption_index) positive pairs in file order."""
        return [(v.video_id, i) for v in self.videos for i in range(len(v.captions))]

    def caption(self, video_id: str, index: int) -> Caption:
        return self.video(video_id).captions[index]

    @property
    def num_captions(self) -> int:
        return sum(len(v.captions) for v in self.videos)


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def build_corpus(path: str | Path, n_max: int = N_MAX) -> Corpus:
    """Load a ``{"video_id", "captions"}`` JSONL dataset into a :class:`Corpus`."""
    videos = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{where}: expected a JSON object")
            vid = obj.get("video_id")
            caps = obj.get("captions")
            if not isinstance(vid, str):
                raise CorpusError(f"{where}: 'video_id' must be a string")
            if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
                raise CorpusError(f"{where}: 'captions' must be a list of strings")
            if not caps:
                raise CorpusError(f"{where}: 'captions' is empty")
            if vid in seen:
                raise CorpusError(f"{where}: duplicate video_id {vid!r}")
            seen.add(vid)
            videos.append(VideoEntry(vid, tuple(Caption.from_text(vid, c) for c in caps)))
    return Corpus(videos, n_max=n_max)


def write_jsonl(path: str | Path, corpus_dict: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, caps in corpus_dict.items():
            fh.write(json.dumps({"video_id": vid, "captions": caps}) + "\n")
