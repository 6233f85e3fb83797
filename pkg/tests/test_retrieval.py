import threading

import numpy as np
import pytest

from artpose import retrieval as rt
from artpose.geometry import FLIP_PERM, Keypoint, NUM_KEYPOINTS
from artpose.retrieval import (
    IndexEntry,
    PoseDescriptor,
    RetrievalIndex,
    VoteRecord,
    VotesStore,
    compute_descriptor,
    load_index,
    query_topk,
    save_index,
)


def random_pose(rng, visible=None):
    # coordinates quantized to 2^-20 so dyadic translations/scales transform
    # them without any float rounding (the generator quantizes identically)
    q = 2.0 ** 20
    kps = []
    for j in range(NUM_KEYPOINTS):
        vis = 2 if (visible is None or j in visible) else 0
        x = round(rng.uniform(0.1, 0.9) * q) / q
        y = round(rng.uniform(0.1, 0.9) * q) / q
        kps.append(Keypoint(x, y, j, vis))
    return kps


class TestDescriptor:
    def test_pair_table_is_26_distinct_pairs(self):
        assert len(rt.PAIR_TABLE) == 26
        assert len(set(map(tuple, map(sorted, rt.PAIR_TABLE)))) == 26
        assert rt.DESCRIPTOR_DIM == 52

    def test_translation_invariance_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pose = random_pose(rng)
            moved = [Keypoint(kp.x + 0.3125, kp.y - 0.125, kp.class_id, kp.visibility)
                     for kp in pose]
            a, b = compute_descriptor(pose), compute_descriptor(moved)
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.valid_mask, b.valid_mask)

    def test_scale_invariance_exact(self):
        # power-of-two scales commute exactly with float rounding; other
        # scales are invariant up to an ulp of the normalization
        rng = np.random.default_rng(1)
        for s in (0.5, 2.0, 4.0):
            for _ in range(10):
                pose = random_pose(rng)
                cx, cy = 0.5, 0.75
                scaled = [Keypoint(cx + s * (kp.x - cx), cy + s * (kp.y - cy),
                                   kp.class_id, kp.visibility) for kp in pose]
                a, b = compute_descriptor(pose), compute_descriptor(scaled)
                assert np.array_equal(a.values, b.values)

    def test_scale_invariance_general(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            pose = random_pose(rng)
            s = float(rng.uniform(0.3, 3.0))
            scaled = [Keypoint(0.2 + s * (kp.x - 0.2), 0.1 + s * (kp.y - 0.1),
                               kp.class_id, kp.visibility) for kp in pose]
            a, b = compute_descriptor(pose), compute_descriptor(scaled)
            np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_reflection_symbolic_over_pair_table(self):
        # mirror x and remap classes; each pair maps to another table pair
        # either order-preserved (cos flips) or order-reversed (sin flips)
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        mirrored = [Keypoint(1.0 - kp.x, kp.y, int(FLIP_PERM[kp.class_id]), kp.visibility)
                    for kp in pose]
        a = compute_descriptor(pose)
        b = compute_descriptor(mirrored)
        pair_pos = {pair: i for i, pair in enumerate(rt.PAIR_TABLE)}
        for i, (p, q) in enumerate(rt.PAIR_TABLE):
            sp, sq = int(FLIP_PERM[p]), int(FLIP_PERM[q])
            cos_v, sin_v = a.values[2 * i], a.values[2 * i + 1]
            if (sp, sq) in pair_pos:
                j = pair_pos[(sp, sq)]
                assert b.values[2 * j] == pytest.approx(-cos_v, abs=1e-12)
                assert b.values[2 * j + 1] == pytest.approx(sin_v, abs=1e-12)
            else:
                j = pair_pos[(sq, sp)]
                assert b.values[2 * j] == pytest.approx(cos_v, abs=1e-12)
                assert b.values[2 * j + 1] == pytest.approx(-sin_v, abs=1e-12)

    def test_unit_norm_per_valid_pair(self):
        rng = np.random.default_rng(3)
        desc = compute_descriptor(random_pose(rng))
        pairs = desc.values.reshape(-1, 2)
        for i, valid in enumerate(desc.valid_mask):
            if valid:
                assert np.linalg.norm(pairs[i]) == pytest.approx(1.0, abs=1e-9)
            else:
                assert np.array_equal(pairs[i], [0.0, 0.0])

    def test_invalid_pairs_zero_filled(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng, visible={5, 6, 11})
        desc = compute_descriptor(pose)
        for i, (a, b) in enumerate(rt.PAIR_TABLE):
            expected = a in {5, 6, 11} and b in {5, 6, 11}
            assert desc.valid_mask[i] == expected

    def test_too_few_visible_errors(self):
        rng = np.random.default_rng(5)
        with pytest.raises(rt.RetrievalError):
            compute_descriptor(random_pose(rng, visible={0}))

    def test_shared_invalid_slots_contribute_zero_distance(self):
        rng = np.random.default_rng(6)
        visible = {0, 1, 2, 5, 6}
        d1 = compute_descriptor(random_pose(rng, visible=visible))
        d2 = compute_descriptor(random_pose(rng, visible=visible))
        invalid = ~d1.valid_mask & ~d2.valid_mask
        diff = (d1.values - d2.values).reshape(-1, 2)
        assert np.all(diff[invalid] == 0.0)


def make_index(rng, n=12):
    index = RetrievalIndex()
    for i in range(n):
        desc = compute_descriptor(random_pose(rng))
        index.add(IndexEntry(image_id=f"im{i:03d}", person_index=0, descriptor=desc,
                             thumbnail=f"im{i:03d}_0.png"))
    return index


class TestQueryTopk:
    def test_self_at_rank_one(self):
        rng = np.random.default_rng(7)
        index = make_index(rng)
        target = index.entries[4]
        ranked = query_topk(index, target.descriptor, k=3)
        assert ranked[0][0].result_id == target.result_id
        assert ranked[0][1] == 0.0

    def test_two_entry_hand_case(self):
        index = RetrievalIndex()
        near = np.zeros(rt.DESCRIPTOR_DIM)
        near[0] = 1.0
        far = np.zeros(rt.DESCRIPTOR_DIM)
        far[0] = -1.0
        mask = np.zeros(26, dtype=bool)
        mask[0] = True
        index.add(IndexEntry("a", 0, PoseDescriptor(near.copy(), mask.copy())))
        index.add(IndexEntry("b", 0, PoseDescriptor(far, mask.copy())))
        query = np.zeros(rt.DESCRIPTOR_DIM)
        query[0] = 0.5
        ranked = query_topk(index, PoseDescriptor(query, mask.copy()), k=1)
        assert ranked[0][0].image_id == "a"
        assert ranked[0][1] == pytest.approx(0.5)

    def test_prefix_property(self):
        rng = np.random.default_rng(8)
        index = make_index(rng, n=25)
        query = compute_descriptor(random_pose(rng))
        top20 = [e.result_id for e, _ in query_topk(index, query, k=20)]
        top5 = [e.result_id for e, _ in query_topk(index, query, k=5)]
        assert top20[:5] == top5

    def test_k_capped_at_index_size(self):
        rng = np.random.default_rng(9)
        index = make_index(rng, n=4)
        query = compute_descriptor(random_pose(rng))
        assert len(query_topk(index, query, k=100)) == 4

    def test_dimension_mismatch_rejected_at_construction(self):
        with pytest.raises(rt.RetrievalError):
            PoseDescriptor(values=np.zeros(10), valid_mask=np.zeros(26, dtype=bool))

    def test_empty_index(self):
        rng = np.random.default_rng(11)
        with pytest.raises(rt.RetrievalError):
            query_topk(RetrievalIndex(), compute_descriptor(random_pose(rng)), k=1)


class TestIndexPersistence:
    def test_round_trip_identical_search(self, tmp_path):
        rng = np.random.default_rng(12)
        index = make_index(rng, n=15)
        path = tmp_path / "poses.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.version == index.version
        query = compute_descriptor(random_pose(rng))
        a = [(e.result_id, d) for e, d in query_topk(index, query, k=10)]
        b = [(e.result_id, d) for e, d in query_topk(loaded, query, k=10)]
        assert a == b

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.idx"
        path.write_bytes(b"nope")
        with pytest.raises(rt.RetrievalError):
            load_index(path)

    def test_duplicate_entry_rejected(self):
        rng = np.random.default_rng(13)
        index = make_index(rng, n=2)
        with pytest.raises(rt.RetrievalError):
            index.add(index.entries[0])


class TestVotesStore:
    def test_upsert_latest_wins(self, tmp_path):
        store = VotesStore(tmp_path / "votes.jsonl")
        store.upsert(VoteRecord("s1", "q1", "r1", "relevant", 1.0))
        store.upsert(VoteRecord("s1", "q1", "r1", "irrelevant", 2.0))
        votes = store.votes_for_query("q1", "s1")
        assert votes["r1"].vote == "irrelevant"
        assert len(store) == 1

    def test_survives_restart(self, tmp_path):
        path = tmp_path / "votes.jsonl"
        store = VotesStore(path)
        store.upsert(VoteRecord("s1", "q1", "r1", "relevant", 1.0))
        store.upsert(VoteRecord("s1", "q1", "r2", "indifferent", 2.0))
        reloaded = VotesStore(path)
        votes = reloaded.votes_for_query("q1", "s1")
        assert votes["r1"].vote == "relevant"
        assert votes["r2"].vote == "indifferent"

    def test_session_filter(self, tmp_path):
        store = VotesStore(tmp_path / "votes.jsonl")
        store.upsert(VoteRecord("s1", "q1", "r1", "relevant", 1.0))
        store.upsert(VoteRecord("s2", "q1", "r1", "irrelevant", 2.0))
        assert store.votes_for_query("q1", "s1")["r1"].vote == "relevant"
        assert store.votes_for_query("q1", "s2")["r1"].vote == "irrelevant"
        # without a session filter the newest record wins
        assert store.votes_for_query("q1")["r1"].vote == "irrelevant"

    def test_bad_vote_value_rejected(self):
        with pytest.raises(rt.RetrievalError):
            VoteRecord("s", "q", "r", "meh", 0.0)

    def test_concurrent_appends_no_corruption(self, tmp_path):
        path = tmp_path / "votes.jsonl"
        store = VotesStore(path)

        def worker(tid):
            for i in range(25):
                store.upsert(VoteRecord(f"s{tid}", "q", f"r{i}", "relevant", float(i)))

        threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        reloaded = VotesStore(path)
        assert len(reloaded) == 4 * 25
