import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from advface.dataset import (
    DatasetError,
    DatasetIndex,
    Entry,
    GalleryTrial,
    IdentitySplit,
    ImageStore,
    VerificationPairSet,
    build_gallery_trials,
    build_index,
    build_verification_pairs,
    load_trials,
    save_json,
    split_identities,
)


def write_corpus(root, sizes, hw=(8, 8)):
    rng = np.random.default_rng(0)
    for ident, n in sizes.items():
        d = root / ident
        d.mkdir(parents=True)
        for j in range(n):
            arr = (rng.random((*hw, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{j}.png")
    return root


def synthetic_index(sizes):
    """In-memory index (no files) with the given images per identity."""
    entries = tuple(
        Entry(f"{ident}/{j}", ident, f"{ident}/{j}.png") for ident, n in sizes.items() for j in range(n)
    )
    return DatasetIndex("/nonexistent", entries, (8, 8, 3))


class TestBuildIndex:
    def test_two_identities_three_images(self, tmp_path):
        idx = build_index(write_corpus(tmp_path, {"a": 3, "b": 3}), (8, 8, 3))
        assert len(idx.entries) == 6
        assert idx.identities == ["a", "b"]

    def test_singleton_identity_dropped(self, tmp_path):
        idx = build_index(write_corpus(tmp_path, {"a": 3, "b": 1}), (8, 8, 3))
        assert idx.identities == ["a"]
        assert idx.dropped_identities == 1

    def test_fixture_corpus_size(self, fixture_index):
        assert len(fixture_index.entries) == 40 * 20
        assert len(fixture_index.identities) == 40

    def test_undecodable_skipped(self, tmp_path):
        root = write_corpus(tmp_path, {"a": 3, "b": 2})
        (root / "a" / "broken.png").write_bytes(b"not an image")
        idx = build_index(root, (8, 8, 3))
        assert idx.skipped == ("a/broken.png",)
        assert len(idx.entries) == 5

    def test_resizes_to_declared_size(self, tmp_path):
        idx = build_index(write_corpus(tmp_path, {"a": 2, "b": 2}, hw=(13, 9)), (16, 16, 3))
        x = ImageStore(idx).load([e.image_id for e in idx.entries])
        assert x.shape == (4, 3, 16, 16)
        assert 0.0 <= float(x.min()) and float(x.max()) <= 1.0

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            build_index(tmp_path / "nope")

    def test_no_usable_identities(self, tmp_path):
        with pytest.raises(DatasetError):
            build_index(write_corpus(tmp_path, {"a": 1, "b": 1}), (8, 8, 3))

    def test_json_roundtrip(self, tmp_path):
        idx = build_index(write_corpus(tmp_path / "c", {"a": 2, "b": 3}), (8, 8, 3))
        save_json(idx, tmp_path / "index.json")
        back = DatasetIndex.from_json(json.loads((tmp_path / "index.json").read_text()))
        assert back == idx


class TestSplit:
    def test_equal_partitions(self, fixture_index):
        s = split_identities(fixture_index, 0.5, seed=3)
        assert len(s.train_identities) == len(s.eval_identities) == 20
        assert not s.train_identities & s.eval_identities
        assert s.train_identities | s.eval_identities == set(fixture_index.identities)

    def test_deterministic(self, fixture_index):
        assert split_identities(fixture_index, 0.5, 7) == split_identities(fixture_index, 0.5, 7)

    def test_odd_count_rounds_half_up(self):
        # floor(0.5 * 7 + 0.5) = 4 eval identities, 3 train
        s = split_identities(synthetic_index({f"i{k}": 2 for k in range(7)}), 0.5, 0)
        assert (len(s.train_identities), len(s.eval_identities)) == (3, 4)
        assert not s.train_identities & s.eval_identities

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_identities(synthetic_index({"a": 2, "b": 2}), frac, 0)

    def test_too_few_identities(self):
        with pytest.raises(DatasetError):
            split_identities(synthetic_index({"a": 2}), 0.5, 0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(2, 30), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**16))
    def test_disjoint_exhaustive(self, n, frac, seed):
        idx = synthetic_index({f"i{k}": 2 for k in range(n)})
        s = split_identities(idx, frac, seed)
        assert not s.train_identities & s.eval_identities
        assert s.train_identities | s.eval_identities == set(idx.identities)
        assert s == split_identities(idx, frac, seed)

    def test_json_roundtrip(self, fixture_index):
        s = split_identities(fixture_index, 0.5, 1)
        assert IdentitySplit.from_json(json.loads(json.dumps(s.to_json()))) == s


def check_pairs(idx, ps):
    labels = [p.label for p in ps.pairs]
    assert labels.count("positive") == labels.count("negative")
    keys = set()
    for p in ps.pairs:
        same = idx.identity_of(p.image_id_a) == idx.identity_of(p.image_id_b)
        assert same == p.is_positive
        assert p.image_id_a != p.image_id_b
        keys.add(frozenset((p.image_id_a, p.image_id_b)))
    assert len(keys) == len(ps.pairs)


class TestVerificationPairs:
    def test_three_plus_one(self):
        idx = synthetic_index({"a": 3, "b": 1})
        ps = build_verification_pairs(idx, {"a", "b"}, seed=0)
        pos = {frozenset((p.image_id_a, p.image_id_b)) for p in ps.pairs if p.is_positive}
        neg = {frozenset((p.image_id_a, p.image_id_b)) for p in ps.pairs if not p.is_positive}
        # hand enumeration: 3 same-identity pairs, 3 cross pairs with the single b image
        assert pos == {frozenset(c) for c in combinations(["a/0", "a/1", "a/2"], 2)}
        assert neg == {frozenset((f"a/{k}", "b/0")) for k in range(3)}

    def test_two_by_two(self):
        idx = synthetic_index({"a": 2, "b": 2})
        ps = build_verification_pairs(idx, {"a", "b"}, seed=5)
        all_neg = {frozenset((f"a/{i}", f"b/{j}")) for i in range(2) for j in range(2)}
        neg = {frozenset((p.image_id_a, p.image_id_b)) for p in ps.pairs if not p.is_positive}
        assert sum(p.is_positive for p in ps.pairs) == 2
        assert len(neg) == 2 and neg <= all_neg
        check_pairs(idx, ps)

    def test_cap(self):
        idx = synthetic_index({f"i{k}": 5 for k in range(10)})  # 10 * C(5,2) = 100 positives
        ps = build_verification_pairs(idx, idx.identities, max_pairs=4, seed=0)
        assert len(ps) == 4
        assert sum(p.is_positive for p in ps.pairs) == 2

    def test_no_positive_possible(self):
        with pytest.raises(DatasetError):
            build_verification_pairs(synthetic_index({"a": 1, "b": 1}), {"a", "b"})

    def test_unknown_identity(self):
        with pytest.raises(DatasetError):
            build_verification_pairs(synthetic_index({"a": 2, "b": 2}), {"zzz"})

    @settings(max_examples=40, deadline=None)
    @given(
        sizes=st.lists(st.integers(1, 7), min_size=2, max_size=8).filter(lambda s: max(s) >= 2),
        cap=st.one_of(st.none(), st.integers(2, 60)),
        seed=st.integers(0, 1000),
    )
    def test_invariants(self, sizes, cap, seed):
        idx = synthetic_index({f"i{k}": n for k, n in enumerate(sizes)})
        ps = build_verification_pairs(idx, idx.identities, cap, seed)
        check_pairs(idx, ps)
        if cap is not None:
            assert len(ps) <= cap
        assert ps == build_verification_pairs(idx, idx.identities, cap, seed)

    def test_rejection_branch_invariants(self, fixture_index):
        ps = build_verification_pairs(fixture_index, fixture_index.identities, 500, 1)
        assert len(ps) == 500
        check_pairs(fixture_index, ps)

    def test_json_roundtrip(self, tmp_path):
        idx = synthetic_index({"a": 3, "b": 3})
        ps = build_verification_pairs(idx, idx.identities, seed=2)
        save_json(ps, tmp_path / "pairs.json")
        data = json.loads((tmp_path / "pairs.json").read_text())
        assert data["seed"] == 2
        assert VerificationPairSet.from_json(data) == ps


def check_trial(idx, t):
    idents = [i for _, i in t.gallery]
    assert len(set(idents)) == len(idents)
    assert idents.count(t.probe_identity) == 1
    assert t.probe_image_id not in {g for g, _ in t.gallery}
    assert idx.identity_of(t.probe_image_id) == t.probe_identity
    for g, i in t.gallery:
        assert idx.identity_of(g) == i


class TestGalleryTrials:
    def test_invariants_and_determinism(self, fixture_index):
        ids = fixture_index.identities[:10]
        trials = build_gallery_trials(fixture_index, ids, gallery_size=5, n_trials=50, seed=4)
        assert len(trials) == 50
        for t in trials:
            check_trial(fixture_index, t)
        assert trials == build_gallery_trials(fixture_index, ids, gallery_size=5, n_trials=50, seed=4)

    def test_probe_all_counts(self, fixture_index):
        trials = build_gallery_trials(fixture_index, fixture_index.identities, 10, 7, seed=0, probe_all=True)
        assert len(trials) == 70
        # each gallery is probed once per identity
        assert len({t.probe_identity for t in trials[:10]}) == 10

    def test_gallery_of_one(self):
        idx = synthetic_index({"a": 3, "b": 2})
        for t in build_gallery_trials(idx, idx.identities, gallery_size=1, n_trials=5, seed=0):
            assert [i for _, i in t.gallery] == [t.probe_identity]

    def test_too_large(self):
        idx = synthetic_index({"a": 3, "b": 2, "c": 1})
        with pytest.raises(DatasetError):
            build_gallery_trials(idx, idx.identities, gallery_size=3, n_trials=1)

    def test_json_roundtrip(self, tmp_path):
        idx = synthetic_index({"a": 3, "b": 2, "c": 2})
        trials = build_gallery_trials(idx, idx.identities, 2, 4, seed=9)
        save_json(trials, tmp_path / "t.json")
        assert load_trials(tmp_path / "t.json") == trials
        assert all(d["seed"] == 9 for d in json.loads((tmp_path / "t.json").read_text()))
        assert GalleryTrial.from_json(trials[0].to_json()) == trials[0]
