import logging
import math

import numpy as np
import pytest

from gmcloss.bias import (
    BiasCodebooks, Codebook, bias_angles, bias_score, bucket_histogram, info_score_sentence,
    info_score_video, loss_b, score_corpus, sentence_bucket, video_bucket,
)
from gmcloss.corpus import Corpus
from gmcloss.synthetic import TOY

from oracles import cider_oracle


def _tokens(corpus):
    return [[list(c.tokens) for c in v.captions] for v in corpus.videos]


def test_sentence_score_is_leave_one_out_cider():
    corpus = Corpus.from_dict(TOY)
    toks = _tokens(corpus)
    for vi, video in enumerate(corpus.videos):
        for i, cap in enumerate(video.captions):
            refs = toks[vi][:i] + toks[vi][i + 1:]
            want = cider_oracle(toks[vi][i], refs, toks)
            assert info_score_sentence(cap, corpus) == pytest.approx(want, abs=1e-9)


def test_video_score_is_rounded_mean_of_raw_scores():
    corpus = Corpus.from_dict(TOY)
    video = corpus.videos[0]
    raw = [info_score_sentence(c, corpus) for c in video.captions]
    assert info_score_video(video, corpus) == round(sum(raw) / len(raw), 1)


def test_single_caption_video_scores_zero_with_warning(caplog):
    corpus = Corpus.from_dict({"solo": ["a dog"], "pair": ["a cat", "a cat runs"]})
    with caplog.at_level(logging.WARNING):
        assert info_score_sentence(corpus.caption("solo", 0), corpus) == 0.0
    assert "single caption" in caplog.text
    scores = score_corpus(corpus)
    assert scores[0].sentence_score == 0.0 and scores[0].video_score == 0.0


@pytest.mark.parametrize("score, s_bucket, v_bucket", [
    (0.0, 0, 0), (0.123, 12, 1), (0.126, 13, 1), (1.05, 105, 11), (2.349, 235, 23),
])
def test_buckets(score, s_bucket, v_bucket):
    assert sentence_bucket(score) == s_bucket
    assert video_bucket(score) == v_bucket


def test_score_rows_are_rounded_and_in_corpus_order():
    corpus = Corpus.from_dict(TOY)
    scores = score_corpus(corpus)
    assert [(s.video_id, s.caption_index) for s in scores] == corpus.pairs()
    for s in scores:
        assert s.sentence_score == round(s.sentence_score, 2)
        assert s.video_score == round(s.video_score, 1)
    row = scores[0].to_json()
    assert set(row) == {"video_id", "caption_index", "sentence_score", "video_score",
                        "sentence_bucket", "video_bucket"}


def test_histogram_orders_and_counts():
    corpus = Corpus.from_dict(TOY)
    scores = score_corpus(corpus)
    desc = bucket_histogram(scores, "sentence", "desc")
    asc = bucket_histogram(scores, "sentence", "asc")
    assert sum(f for _, f, _ in desc) == len(scores)
    assert [b for _, _, b in desc] == sorted((b for _, _, b in desc), reverse=True)
    assert [b for _, _, b in asc] == sorted(b for _, _, b in desc)
    video = bucket_histogram(scores, "video")
    assert sum(f for _, f, _ in video) == len(corpus)
    with pytest.raises(ValueError):
        bucket_histogram(scores, "word")


def test_codebook_rows_independent_of_creation_order():
    a = Codebook(dim=8, seed=3, side=1)
    b = Codebook(dim=8, seed=3, side=1)
    a.ensure([5, 1, 9])
    b.ensure([9])
    b.ensure([1, 5])
    for k in (1, 5, 9):
        np.testing.assert_array_equal(a.vector(k), b.vector(k))
        assert np.abs(a.vector(k)).max() <= 0.1
    c = Codebook(dim=8, seed=3, side=0)
    c.ensure([5])
    assert not np.array_equal(c.vector(5), a.vector(5))


def test_codebook_state_roundtrip():
    a = Codebook(dim=4, seed=0)
    a.ensure([2, 7])
    b = Codebook(dim=4, seed=0)
    b.load_state(a.state())
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    assert a.index([7, 2]).tolist() == b.index([7, 2]).tolist()


def test_bias_score_is_cosine_and_angle():
    books = BiasCodebooks.create(dim=6, seed=1)
    books.video.ensure([3])
    books.sentence.ensure([40])
    psi, phi = books.video.vector(3), books.sentence.vector(40)
    want = psi @ phi / np.linalg.norm(psi) / np.linalg.norm(phi)
    got = bias_score(3, 40, books)
    assert got.y_hat == pytest.approx(want, abs=1e-12)
    assert got.xi_hat == pytest.approx(math.acos(want), abs=1e-12)
    assert bias_angles([3], [40], books)[0] == pytest.approx(got.xi_hat, abs=1e-12)


def test_loss_b_two_identical_pairs_is_two_ln_two():
    books = BiasCodebooks.create(dim=4, seed=0)
    books.video.ensure([1])
    books.sentence.ensure([10])
    assert loss_b([1, 1], [10, 10], books).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_b_matches_oracle_and_rejects_single_pair():
    books = BiasCodebooks.create(dim=5, seed=2)
    vb, sb = [1, 2, 3], [10, 20, 30]
    books.video.ensure(vb)
    books.sentence.ensure(sb)
    u = np.stack([books.video.vector(k) for k in vb])
    v = np.stack([books.sentence.vector(k) for k in sb])
    cos = (u / np.linalg.norm(u, axis=1, keepdims=True)) @ (v / np.linalg.norm(v, axis=1, keepdims=True)).T
    z = cos / 0.2
    want = -sum(z[i, i] - np.log(np.exp(z[i]).sum()) for i in range(3))
    assert loss_b(vb, sb, books).item() == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        loss_b([1], [10], books)
