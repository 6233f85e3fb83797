"""HTTP service backing the retrieval browser and relevance-voting UI.

The index is immutable after startup, so reads are concurrency-safe; vote
writes go through the store's lock. Field names (query_id, result_id, vote,
distance, rank) are wire contract and must stay stable for the frontend.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .metrics import ndcg_at_k
from .retrieval import (
    RELEVANCE_GAIN,
    RetrievalIndex,
    VoteRecord,
    VotesStore,
    query_topk,
)

DEFAULT_TOP_K = 20


class QueryOut(BaseModel):
    query_id: str
    thumbnail: str


class SearchResultOut(BaseModel):
    result_id: str
    rank: int
    distance: float
    thumbnail: str
    vote: str | None = None


class SearchOut(BaseModel):
    query_id: str
    k: int
    results: list[SearchResultOut]


class VoteIn(BaseModel):
    session_id: str
    query_id: str
    result_id: str
    vote: Literal["relevant", "indifferent", "irrelevant"]


class VoteOut(BaseModel):
    stored: bool
    session_id: str
    query_id: str
    result_id: str
    vote: str


class NdcgOut(BaseModel):
    query_id: str
    k: int
    status: Literal["ok", "insufficient data"]
    ndcg: float | None = None
    voted: int = 0


def create_app(index: RetrievalIndex, votes: VotesStore, query_ids: list[str],
               thumbs_dir: str | None = None, frontend_dir: str | None = None,
               default_k: int = DEFAULT_TOP_K) -> FastAPI:
    """Wire the service around a built index and a persistent votes store.

    `query_ids` are the configured query poses (result ids of index entries);
    the artifact ships ten by default. Unknown ids in the list fail fast.
    """
    for qid in query_ids:
        if index.find(qid) is None:
            raise ValueError(f"configured query {qid!r} is not in the index")

    app = FastAPI(title="artpose retrieval service")

    def entry_or_404(query_id: str):
        entry = index.find(query_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown query_id {query_id!r}")
        return entry

    def ranked_results(query_id: str, k: int):
        entry = entry_or_404(query_id)
        ranked = query_topk(index, entry.descriptor, k + 1)
        return [(e, d) for e, d in ranked if e.result_id != query_id][:k]

    @app.get("/queries", response_model=list[QueryOut])
    def list_queries():
        return [QueryOut(query_id=qid, thumbnail=index.find(qid).thumbnail)
                for qid in query_ids]

    @app.get("/search", response_model=SearchOut)
    def search(query_id: str, k: int = default_k, session_id: str | None = None):
        if k < 1:
            raise HTTPException(status_code=422, detail="k must be >= 1")
        existing = votes.votes_for_query(query_id, session_id)
        results = [
            SearchResultOut(
                result_id=e.result_id, rank=i + 1, distance=d, thumbnail=e.thumbnail,
                vote=existing[e.result_id].vote if e.result_id in existing else None)
            for i, (e, d) in enumerate(ranked_results(query_id, k))
        ]
        return SearchOut(query_id=query_id, k=k, results=results)

    @app.post("/votes", response_model=VoteOut)
    def post_vote(vote: VoteIn):
        entry_or_404(vote.query_id)
        if index.find(vote.result_id) is None:
            raise HTTPException(status_code=404, detail=f"unknown result_id {vote.result_id!r}")
        votes.upsert(VoteRecord(session_id=vote.session_id, query_id=vote.query_id,
                                result_id=vote.result_id, vote=vote.vote,
                                timestamp=time.time()))
        return VoteOut(stored=True, **vote.model_dump())

    @app.get("/ndcg", response_model=NdcgOut)
    def ndcg(query_id: str, k: int = default_k, session_id: str | None = None):
        ranked = ranked_results(query_id, k)
        recorded = votes.votes_for_query(query_id, session_id)
        if not recorded:
            return NdcgOut(query_id=query_id, k=k, status="insufficient data")
        relevances = [RELEVANCE_GAIN[recorded[e.result_id].vote] if e.result_id in recorded else 0
                      for e, _ in ranked]
        voted = sum(1 for e, _ in ranked if e.result_id in recorded)
        return NdcgOut(query_id=query_id, k=k, status="ok",
                       ndcg=ndcg_at_k(relevances, k=min(k, len(relevances))), voted=voted)

    if thumbs_dir is not None:
        thumbs = Path(thumbs_dir)

        @app.get("/thumbnails/{name}")
        def thumbnail(name: str):
            target = (thumbs / name).resolve()
            if not str(target).startswith(str(thumbs.resolve())) or not target.is_file():
                raise HTTPException(status_code=404, detail="no such thumbnail")
            return FileResponse(target)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
