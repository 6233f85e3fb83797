import numpy as np
import pytest
from fastapi.testclient import TestClient

from artpose.geometry import Keypoint, NUM_KEYPOINTS
from artpose.metrics import ndcg_at_k
from artpose.retrieval import (
    IndexEntry,
    RetrievalIndex,
    VotesStore,
    compute_descriptor,
)
from artpose.service import create_app


def build_index(n=30, seed=0):
    rng = np.random.default_rng(seed)
    index = RetrievalIndex()
    for i in range(n):
        kps = [Keypoint(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)), j, 2)
               for j in range(NUM_KEYPOINTS)]
        index.add(IndexEntry(image_id=f"im{i:03d}", person_index=0,
                             descriptor=compute_descriptor(kps),
                             thumbnail=f"im{i:03d}_0.png"))
    return index


@pytest.fixture()
def client(tmp_path):
    index = build_index()
    votes = VotesStore(tmp_path / "votes.jsonl")
    query_ids = [e.result_id for e in index.entries[:10]]
    app = create_app(index, votes, query_ids)
    return TestClient(app)


class TestQueries:
    def test_lists_ten_configured_queries(self, client):
        r = client.get("/queries")
        assert r.status_code == 200
        body = r.json()
        assert len(body) == 10
        assert all("query_id" in q and "thumbnail" in q for q in body)

    def test_stable_order(self, client):
        a = client.get("/queries").json()
        b = client.get("/queries").json()
        assert a == b

    def test_unknown_query_configured_fails_fast(self, tmp_path):
        index = build_index(n=3)
        with pytest.raises(ValueError):
            create_app(index, VotesStore(tmp_path / "v.jsonl"), ["missing:0"])


class TestSearch:
    def test_default_k_twenty(self, client):
        qid = client.get("/queries").json()[0]["query_id"]
        r = client.get("/search", params={"query_id": qid})
        assert r.status_code == 200
        body = r.json()
        assert len(body["results"]) == 20
        assert [res["rank"] for res in body["results"]] == list(range(1, 21))
        dists = [res["distance"] for res in body["results"]]
        assert dists == sorted(dists)

    def test_query_itself_excluded(self, client):
        qid = client.get("/queries").json()[0]["query_id"]
        body = client.get("/search", params={"query_id": qid, "k": 20}).json()
        assert qid not in [res["result_id"] for res in body["results"]]

    def test_unknown_query_404(self, client):
        assert client.get("/search", params={"query_id": "nope:0"}).status_code == 404

    def test_prefix_property(self, client):
        qid = client.get("/queries").json()[1]["query_id"]
        top20 = client.get("/search", params={"query_id": qid, "k": 20}).json()["results"]
        top5 = client.get("/search", params={"query_id": qid, "k": 5}).json()["results"]
        assert [r["result_id"] for r in top20[:5]] == [r["result_id"] for r in top5]


class TestVotes:
    def test_vote_then_ndcg_all_relevant(self, client):
        qid = client.get("/queries").json()[0]["query_id"]
        results = client.get("/search", params={"query_id": qid}).json()["results"]
        for res in results:
            r = client.post("/votes", json={
                "session_id": "s1", "query_id": qid,
                "result_id": res["result_id"], "vote": "relevant"})
            assert r.status_code == 200
        out = client.get("/ndcg", params={"query_id": qid, "session_id": "s1"}).json()
        assert out["status"] == "ok"
        assert out["ndcg"] == pytest.approx(1.0)
        assert out["voted"] == 20

    def test_ndcg_matches_metric_function(self, client):
        qid = client.get("/queries").json()[2]["query_id"]
        results = client.get("/search", params={"query_id": qid}).json()["results"]
        choices = ["relevant", "indifferent", "irrelevant"]
        gains = {"relevant": 2, "indifferent": 1, "irrelevant": 0}
        rels = []
        for i, res in enumerate(results):
            vote = choices[i % 3]
            rels.append(gains[vote])
            client.post("/votes", json={"session_id": "s2", "query_id": qid,
                                        "result_id": res["result_id"], "vote": vote})
        out = client.get("/ndcg", params={"query_id": qid, "session_id": "s2"}).json()
        assert out["ndcg"] == pytest.approx(ndcg_at_k(rels, k=20), abs=1e-12)

    def test_no_votes_insufficient_data(self, client):
        qid = client.get("/queries").json()[3]["query_id"]
        out = client.get("/ndcg", params={"query_id": qid}).json()
        assert out["status"] == "insufficient data"
        assert out["ndcg"] is None

    def test_revote_upserts(self, client):
        qid = client.get("/queries").json()[4]["query_id"]
        res = client.get("/search", params={"query_id": qid}).json()["results"][0]
        for vote in ("relevant", "irrelevant"):
            client.post("/votes", json={"session_id": "s3", "query_id": qid,
                                        "result_id": res["result_id"], "vote": vote})
        body = client.get("/search", params={"query_id": qid, "session_id": "s3"}).json()
        assert body["results"][0]["vote"] == "irrelevant"

    def test_malformed_vote_lists_fields(self, client):
        r = client.post("/votes", json={"session_id": "s4", "vote": "relevant"})
        assert r.status_code == 422
        missing = {err["loc"][-1] for err in r.json()["detail"]}
        assert {"query_id", "result_id"} <= missing

    def test_bad_vote_choice_rejected(self, client):
        qid = client.get("/queries").json()[0]["query_id"]
        r = client.post("/votes", json={"session_id": "s5", "query_id": qid,
                                        "result_id": qid, "vote": "love it"})
        assert r.status_code == 422

    def test_vote_for_unknown_result_404(self, client):
        qid = client.get("/queries").json()[0]["query_id"]
        r = client.post("/votes", json={"session_id": "s6", "query_id": qid,
                                        "result_id": "ghost:9", "vote": "relevant"})
        assert r.status_code == 404
