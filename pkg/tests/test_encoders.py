import json

import numpy as np
import pytest

from gmcloss import autodiff as ad
from gmcloss.encoders import FusionHead, ImportedFeatures, SyntheticFeatures, Vocab, dual_cosines, fusion_matrix


def _rows(rng, b, d):
    return ad.Tensor(rng.normal(size=(b, d)))


def test_fusion_matrix_matches_per_pair_scores():
    rng = np.random.default_rng(0)
    head = FusionHead(dim=5, seed=1)
    v, t = _rows(rng, 3, 5), _rows(rng, 4, 5)
    fused = fusion_matrix(v, t, head).data
    assert fused.shape == (3, 4)
    for i in range(3):
        for j in range(4):
            seq = ad.Tensor(np.stack([v.data[i], t.data[j]])[None])
            assert fused[i, j] == pytest.approx(head.score_pairs(seq).data[0], abs=1e-12)


def test_fusion_matrix_is_permutation_equivariant():
    rng = np.random.default_rng(1)
    head = FusionHead(dim=4, seed=0)
    v, t = _rows(rng, 4, 4), _rows(rng, 4, 4)
    perm = rng.permutation(4)
    fused = fusion_matrix(v, t, head).data
    permuted = fusion_matrix(ad.Tensor(v.data[perm]), ad.Tensor(t.data[perm]), head).data
    np.testing.assert_allclose(permuted, fused[np.ix_(perm, perm)], atol=1e-12)


def test_fusion_rejects_wrong_dims():
    head = FusionHead(dim=4)
    with pytest.raises(ad.ShapeError):
        fusion_matrix(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))), head)


def test_dual_cosines():
    rng = np.random.default_rng(2)
    v, t = _rows(rng, 3, 6), _rows(rng, 3, 6)
    cos, theta = dual_cosines(v, t)
    vn = v.data / np.linalg.norm(v.data, axis=1, keepdims=True)
    tn = t.data / np.linalg.norm(t.data, axis=1, keepdims=True)
    np.testing.assert_allclose(cos.data, vn @ tn.T, atol=1e-12)
    np.testing.assert_allclose(theta.data, np.arccos(vn @ tn.T), atol=1e-9)


def test_vocab_maps_unknown_tokens():
    vocab = Vocab(["b", "a", "b"])
    assert vocab.itos == ["<unk>", "a", "b"]
    assert vocab.encode(["a", "zzz"]) == [1, 0]


def test_synthetic_features_are_seeded():
    vocab = Vocab(["a", "b"])
    f1 = SyntheticFeatures(["v0", "v1"], vocab, dim=4, seed=3)
    f2 = SyntheticFeatures(["v0", "v1"], vocab, dim=4, seed=3)
    a = f1.encode_batch(["v1", "v0"], [0, 0], [["a"], ["b", "a"]])
    b = f2.encode_batch(["v1", "v0"], [0, 0], [["a"], ["b", "a"]])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
    with pytest.raises(KeyError):
        f1.encode_videos(["nope"])


def test_imported_features(tmp_path):
    path = tmp_path / "f.jsonl"
    rows = [
        {"id": "v0", "kind": "video", "vector": [1.0, 0.0]},
        {"id": "v0", "kind": "text_0", "vector": [0.0, 1.0]},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    feats = ImportedFeatures.load(path)
    v, t = feats.encode_batch(["v0"], [0], [["x"]])
    assert v.data.tolist() == [[1.0, 0.0]] and t.data.tolist() == [[0.0, 1.0]]
    assert feats.parameters() == {}
    with pytest.raises(KeyError):
        feats.encode_batch(["v0"], [3], [["x"]])


def test_imported_features_reject_mixed_dims(tmp_path):
    path = tmp_path / "f.jsonl"
    rows = [
        {"id": "v0", "kind": "video", "vector": [1.0, 0.0]},
        {"id": "v0", "kind": "text_0", "vector": [0.0, 1.0, 2.0]},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(ValueError, match="inconsistent"):
        ImportedFeatures.load(path)
