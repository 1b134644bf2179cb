"""HTTP review service over pipeline exports.

Serves candidate listings, details and images from read-only export
directories and persists reviewer verdicts to an append-only JSON-lines
log per slide. The log is fsynced before a verdict is acknowledged and
replayed at startup, so an abrupt crash never loses an acked verdict.

Note: no ``from __future__ import annotations`` here; FastAPI must see
live annotation objects to resolve the function-local request model.
"""

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import BadDecision, UnknownCandidate, UnknownSlide

DECISIONS = ("ctc", "non-ctc", "artefact")
IMAGE_KINDS = ("dapi", "ck", "cd45", "composite", "overlay")
MASK_KINDS = {"nucleus_mask": "nucleus", "cell_mask": "cell"}
DEFAULT_PAGE_SIZE = 20


def utc_now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class Verdict:
    candidate_id: str
    decision: str
    reviewer: str
    ts: str  # RFC 3339, UTC

    def to_json(self) -> dict:
        return {"candidate_id": self.candidate_id, "decision": self.decision,
                "reviewer": self.reviewer, "ts": self.ts}


@dataclass
class _SlideExport:
    slide_id: str
    root: Path
    candidates: list = field(default_factory=list)  # raw candidates.json entries
    by_id: dict = field(default_factory=dict)


class ReviewStore:
    """Exports plus a durable verdict log; all reads are pure over both."""

    def __init__(self, export_roots, log_dir=None):
        if isinstance(export_roots, (str, Path)):
            export_roots = [export_roots]
        self._slides: dict[str, _SlideExport] = {}
        self._candidate_slide: dict[str, str] = {}
        self._verdicts: dict[str, list] = {}  # candidate_id -> [Verdict]
        self._seen_lines: set = set()
        self._write_lock = threading.Lock()

        for root in export_roots:
            root = Path(root)
            docs = sorted(root.rglob("candidates.json"))
            for doc_path in docs:
                with open(doc_path) as fh:
                    doc = json.load(fh)
                slide = _SlideExport(slide_id=doc["slide_id"], root=doc_path.parent,
                                     candidates=doc["candidates"])
                for entry in slide.candidates:
                    slide.by_id[entry["id"]] = entry
                    self._candidate_slide[entry["id"]] = slide.slide_id
                self._slides[slide.slide_id] = slide

        self.log_dir = Path(log_dir) if log_dir is not None else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            for slide_id in self._slides:
                self._replay(self._log_path(slide_id))

    # --- persistence ---

    def _log_path(self, slide_id: str) -> Path | None:
        if self.log_dir is None:
            return None
        return self.log_dir / f"{slide_id}_verdicts.jsonl"

    def _replay(self, path: Path | None) -> None:
        if path is None or not path.exists():
            return
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn final line after a crash
                self._record(Verdict(candidate_id=d["candidate_id"],
                                     decision=d["decision"],
                                     reviewer=d["reviewer"], ts=d["ts"]))

    def _record(self, verdict: Verdict) -> None:
        key = (verdict.candidate_id, verdict.reviewer, verdict.decision, verdict.ts)
        if key in self._seen_lines:
            return  # idempotent for identical replayed entries
        self._seen_lines.add(key)
        self._verdicts.setdefault(verdict.candidate_id, []).append(verdict)

    # --- reads ---

    def slide_ids(self) -> list:
        return sorted(self._slides)

    def _slide(self, slide_id: str) -> _SlideExport:
        if slide_id not in self._slides:
            raise UnknownSlide(slide_id)
        return self._slides[slide_id]

    def slide_summary(self, slide_id: str) -> dict:
        slide = self._slide(slide_id)
        return {"slide_id": slide_id, "candidate_count": len(slide.candidates)}

    def effective_verdicts(self, candidate_id: str) -> dict:
        """Latest verdict per reviewer (ties resolved by append order)."""
        latest: dict[str, Verdict] = {}
        for v in self._verdicts.get(candidate_id, []):
            cur = latest.get(v.reviewer)
            if cur is None or v.ts >= cur.ts:
                latest[v.reviewer] = v
        return latest

    def list_candidates(self, slide_id: str, sort: str = "probability",
                        page: int = 1, page_size: int = DEFAULT_PAGE_SIZE) -> dict:
        """Stable pagination over a fixed candidate ordering.

        ``probability`` sorts descending with id tie-breaks (unscored
        candidates last); ``id`` sorts lexicographically.
        """
        slide = self._slide(slide_id)
        if page < 1 or page_size < 1:
            raise ValueError("page and page_size are 1-based positive")
        entries = list(slide.candidates)
        if sort == "probability":
            entries.sort(key=lambda e: (-(e["probability"] if e["probability"]
                                          is not None else -1.0), e["id"]))
        elif sort == "id":
            entries.sort(key=lambda e: e["id"])
        else:
            raise ValueError(f"unknown sort: {sort}")
        total = len(entries)
        start = (page - 1) * page_size
        selected = entries[start:start + page_size]
        return {
            "slide_id": slide_id,
            "page": page,
            "page_size": page_size,
            "total": total,
            "total_pages": (total + page_size - 1) // page_size if total else 0,
            "candidates": [self._summary(e) for e in selected],
        }

    def _summary(self, entry: dict) -> dict:
        effective = self.effective_verdicts(entry["id"])
        return {
            "id": entry["id"],
            "probability": entry["probability"],
            "rule_pass": entry["rule_pass"],
            "fov": entry["fov"],
            "thumbnail": entry["images"]["composite"],
            "verdicts": {rev: v.decision for rev, v in effective.items()},
        }

    def get_candidate(self, candidate_id: str) -> dict:
        slide_id = self._candidate_slide.get(candidate_id)
        if slide_id is None:
            raise UnknownCandidate(candidate_id)
        entry = self._slides[slide_id].by_id[candidate_id]
        detail = dict(entry)
        detail["slide_id"] = slide_id
        effective = self.effective_verdicts(candidate_id)
        detail["verdicts"] = [
            dict(v.to_json(), effective=(effective[v.reviewer] is v))
            for v in self._verdicts.get(candidate_id, [])
        ]
        return detail

    def image_path(self, candidate_id: str, kind: str) -> Path:
        slide_id = self._candidate_slide.get(candidate_id)
        if slide_id is None:
            raise UnknownCandidate(candidate_id)
        slide = self._slides[slide_id]
        entry = slide.by_id[candidate_id]
        if kind in IMAGE_KINDS:
            rel = entry["images"][kind]
        elif kind in MASK_KINDS:
            rel = entry["masks"][MASK_KINDS[kind]]["file"]
        else:
            raise UnknownCandidate(f"{candidate_id} has no image kind {kind}")
        return slide.root / rel

    # --- writes ---

    def post_verdict(self, candidate_id: str, decision: str, reviewer: str,
                     ts: str | None = None) -> Verdict:
        """Durably append one verdict; acknowledged only after fsync."""
        if candidate_id not in self._candidate_slide:
            raise UnknownCandidate(candidate_id)
        if decision not in DECISIONS:
            raise BadDecision(f"decision must be one of {DECISIONS}")
        if not reviewer:
            raise BadDecision("reviewer id required")
        verdict = Verdict(candidate_id=candidate_id, decision=decision,
                          reviewer=reviewer, ts=ts or utc_now_rfc3339())
        slide_id = self._candidate_slide[candidate_id]
        path = self._log_path(slide_id)
        with self._write_lock:
            if path is not None:
                with open(path, "a") as fh:
                    fh.write(json.dumps(verdict.to_json(), sort_keys=True) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._record(verdict)
        return verdict

    # --- reporting ---

    def report(self, slide_id: str) -> dict:
        """Aggregate effective verdicts into confirmed counts and progress."""
        slide = self._slide(slide_id)
        confirmed = {d: 0 for d in DECISIONS}
        disagreements = []
        reviewed_by: dict[str, int] = {}
        for entry in slide.candidates:
            effective = self.effective_verdicts(entry["id"])
            for reviewer in effective:
                reviewed_by[reviewer] = reviewed_by.get(reviewer, 0) + 1
            decisions = {v.decision for v in effective.values()}
            if len(decisions) == 1:
                confirmed[decisions.pop()] += 1
            elif len(decisions) > 1:
                disagreements.append(entry["id"])
        total = len(slide.candidates)
        return {
            "slide_id": slide_id,
            "candidate_count": total,
            "confirmed": confirmed,
            "per_reviewer": {
                rev: {"reviewed": n, "total": total,
                      "progress": (n / total) if total else 0.0}
                for rev, n in sorted(reviewed_by.items())
            },
            "disagreements": sorted(disagreements),
        }


def create_app(export_roots, log_dir=None):
    """FastAPI app over a ReviewStore; CORS is open for the viewer."""
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import FileResponse
    from pydantic import BaseModel

    store = ReviewStore(export_roots, log_dir=log_dir)
    app = FastAPI(title="candidate review API")
    app.state.store = store
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    class VerdictBody(BaseModel):
        decision: str
        reviewer: str
        ts: str | None = None

    @app.get("/slides")
    def slides():
        return [store.slide_summary(sid) for sid in store.slide_ids()]

    @app.get("/slides/{slide_id}/candidates")
    def candidates(slide_id: str, sort: str = "probability", page: int = 1,
                   page_size: int = DEFAULT_PAGE_SIZE):
        try:
            return store.list_candidates(slide_id, sort=sort, page=page,
                                         page_size=page_size)
        except UnknownSlide:
            raise HTTPException(status_code=404, detail=f"unknown slide {slide_id}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/slides/{slide_id}/report")
    def slide_report(slide_id: str):
        try:
            return store.report(slide_id)
        except UnknownSlide:
            raise HTTPException(status_code=404, detail=f"unknown slide {slide_id}")

    @app.get("/candidates/{candidate_id}")
    def candidate(candidate_id: str):
        try:
            return store.get_candidate(candidate_id)
        except UnknownCandidate:
            raise HTTPException(status_code=404,
                                detail=f"unknown candidate {candidate_id}")

    @app.get("/candidates/{candidate_id}/image/{kind}")
    def image(candidate_id: str, kind: str):
        try:
            path = store.image_path(candidate_id, kind)
        except UnknownCandidate:
            raise HTTPException(status_code=404, detail="unknown candidate or kind")
        if not path.exists():
            raise HTTPException(status_code=404, detail="image file missing")
        return FileResponse(path, media_type="image/png")

    @app.post("/candidates/{candidate_id}/verdict")
    def verdict(candidate_id: str, body: VerdictBody):
        try:
            stored = store.post_verdict(candidate_id, body.decision, body.reviewer,
                                        ts=body.ts)
        except UnknownCandidate:
            raise HTTPException(status_code=404,
                                detail=f"unknown candidate {candidate_id}")
        except BadDecision as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return stored.to_json()

    return app


def serve(export_roots, log_dir=None, host: str = "127.0.0.1", port: int = 8400):
    import uvicorn
    uvicorn.run(create_app(export_roots, log_dir=log_dir), host=host, port=port)
