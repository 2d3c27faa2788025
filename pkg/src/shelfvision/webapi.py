"""HTTP facade: classification, word queries, shopping lists, and the
labeling queue feeding the active-learning loop.

All responses are JSON; images arrive as multipart uploads.  Retraining
is atomic: requests issued while a retrain runs are served by the
previous model version, and a concurrent retrain request gets 409.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from fastapi import FastAPI, File, HTTPException, UploadFile
from pydantic import BaseModel

from . import classify, patchmine, textmap
from .activelearn import LabelQuery, confidences, retrain
from .config import PipelineConfig
from .dataset import Catalog, load_catalog
from .service import (artifact_paths, classify_array, model_path,
                      test_features, train_features, word_query_payload)


def _version_of(model: classify.SvmModel) -> str:
    return hashlib.sha256(classify.model_bytes(model)).hexdigest()[:16]


@dataclass
class ShoppingEntry:
    raw: str
    state: str                      # auto | choosing | chosen | unknown
    class_name: str | None = None
    ranking: list[dict] | None = None


@dataclass
class ShoppingList:
    list_id: int
    entries: list[ShoppingEntry]
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)

    def payload(self) -> dict:
        return {
            "id": self.list_id,
            "created": self.created,
            "updated": self.updated,
            "entries": [
                {"raw": e.raw, "state": e.state, "class": e.class_name,
                 "ranking": e.ranking}
                for e in self.entries
            ],
        }


class ServiceState:
    """Mutable service-side state; built once per `serve` invocation."""

    def __init__(self, cfg: PipelineConfig, catalog: Catalog,
                 bank: patchmine.DetectorBank | None,
                 model: classify.SvmModel | None,
                 index: textmap.WordClassIndex | None):
        self.cfg = cfg
        self.catalog = catalog
        self.bank = bank
        self.model = model
        self.index = index
        self.model_version = _version_of(model) if model else None
        self.queue: dict[int, LabelQuery] = {}
        self.queue_by_ref: dict[str, int] = {}
        self.consumed_refs: set[str] = set()
        self.shopping: dict[int, ShoppingList] = {}
        self._next_query_id = 1
        self._next_list_id = 1
        self._retrain_lock = threading.Lock()
        self._pool: tuple[np.ndarray, list[str]] | None = None
        self._base: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "ServiceState":
        catalog = load_catalog(cfg.dataset_root)
        paths = artifact_paths(cfg)
        bank = (patchmine.load_bank(paths["bank"])
                if paths["bank"].is_file() else None)
        mp = model_path(cfg, cfg.variant)
        model = classify.load_model(mp) if mp.is_file() else None
        index = (textmap.WordClassIndex.load(paths["index"])
                 if paths["index"].is_file() else None)
        return cls(cfg, catalog, bank, model, index)

    # -- lazy feature caches -------------------------------------------------

    def pool_features(self) -> tuple[np.ndarray, list[str]]:
        if self._pool is None:
            pyramid = self.model.feature_mode == "pyramid"
            X, _ = test_features(self.catalog, self.bank, pyramid,
                                 self.cfg.workers)
            refs = [r for r, _ in self.catalog.test_images]
            self._pool = (X, refs)
        return self._pool

    def base_features(self) -> tuple[np.ndarray, np.ndarray]:
        if self._base is None:
            pyramid = self.model.feature_mode == "pyramid"
            self._base = train_features(self.catalog, self.bank, pyramid,
                                        self.cfg.workers)
        return self._base

    def try_begin_retrain(self) -> bool:
        return self._retrain_lock.acquire(blocking=False)

    def end_retrain(self) -> None:
        self._retrain_lock.release()


class EntryChoice(BaseModel):
    class_name: str


class ShoppingListBody(BaseModel):
    entries: list[str]


class LabelBody(BaseModel):
    label: str | None = None
    skip: bool = False


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="shelfvision")

    def require_model():
        if state.model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        if state.model.feature_mode != "bow" and state.bank is None:
            raise HTTPException(status_code=503, detail="detector bank not loaded")

    @app.get("/health")
    def health():
        return {"status": "ok",
                "model_loaded": state.model is not None,
                "index_loaded": state.index is not None,
                "model_version": state.model_version}

    @app.get("/model")
    def model_info():
        require_model()
        return {"model_version": state.model_version,
                "variant": state.cfg.variant,
                "kernel": state.model.kernel,
                "classes": state.catalog.classes}

    # -- classification ------------------------------------------------------

    @app.post("/classify")
    async def classify_upload(file: UploadFile = File(...),
                              tau: float | None = None):
        require_model()
        raw = await file.read()
        arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_COLOR)
        if arr is None:
            raise HTTPException(status_code=400, detail="image not decodable")
        rgb = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
        model = state.model   # snapshot: retrain swaps are atomic
        version = state.model_version
        c, score = classify_array(rgb, state.catalog.classes, state.cfg,
                                  state.cfg.variant, state.bank, model)
        tau = state.cfg.notify_tau if tau is None else tau
        notified = c is not None and score > tau
        return {"class_index": c,
                "class_name": state.catalog.classes[c] if c is not None else None,
                "score": score, "tau": tau, "notified": notified,
                "model_version": version}

    # -- word queries and shopping lists ------------------------------------

    @app.get("/words/{token}")
    def words(token: str):
        if state.index is None:
            raise HTTPException(status_code=503, detail="word index not loaded")
        return word_query_payload(textmap.query_word(state.index, token))

    def _resolve_entry(raw: str) -> ShoppingEntry:
        if state.index is None:
            return ShoppingEntry(raw=raw, state="unknown")
        result = textmap.query_word(state.index, raw)
        if isinstance(result, textmap.AutoMapped):
            return ShoppingEntry(raw=raw, state="auto",
                                 class_name=result.class_name)
        if isinstance(result, textmap.Ranked):
            ranking = [{"class": e.class_name, "count": e.count,
                        "confidence": e.confidence} for e in result.entries]
            return ShoppingEntry(raw=raw, state="choosing", ranking=ranking)
        return ShoppingEntry(raw=raw, state="unknown")

    @app.post("/shopping-list", status_code=201)
    def create_list(body: ShoppingListBody):
        lst = ShoppingList(list_id=state._next_list_id,
                           entries=[_resolve_entry(w) for w in body.entries])
        state._next_list_id += 1
        state.shopping[lst.list_id] = lst
        return lst.payload()

    @app.get("/shopping-list/{list_id}")
    def get_list(list_id: int):
        lst = state.shopping.get(list_id)
        if lst is None:
            raise HTTPException(status_code=404, detail="unknown shopping list")
        return lst.payload()

    @app.patch("/shopping-list/{list_id}/entries/{n}")
    def choose_entry(list_id: int, n: int, body: EntryChoice):
        lst = state.shopping.get(list_id)
        if lst is None:
            raise HTTPException(status_code=404, detail="unknown shopping list")
        if not 0 <= n < len(lst.entries):
            raise HTTPException(status_code=404, detail="unknown entry")
        if body.class_name not in state.catalog.classes:
            raise HTTPException(status_code=400,
                                detail=f"unknown class {body.class_name!r}")
        entry = lst.entries[n]
        entry.state = "chosen"
        entry.class_name = body.class_name
        lst.updated = time.time()
        return lst.payload()

    # -- labeling queue ------------------------------------------------------

    @app.get("/label-queue")
    def label_queue(k: int = 5):
        require_model()
        if k < 1:
            raise HTTPException(status_code=400, detail="k must be >= 1")
        X, refs = state.pool_features()
        open_refs = [r for r in refs if r not in state.consumed_refs]
        candidates = []
        for ref in open_refs:
            qid = state.queue_by_ref.get(ref)
            if qid is not None and state.queue[qid].status != "pending":
                continue
            candidates.append(ref)
        if not candidates:
            return {"queries": []}
        idx = [refs.index(r) for r in candidates]
        conf = confidences(state.model, X[np.array(idx)],
                           state.cfg.al_selection
                           if state.cfg.al_selection != "random" else "uncertainty")
        values = state.model.decision_values(X[np.array(idx)])
        order = np.argsort(conf, kind="stable")[:k]
        out = []
        for o in order:
            ref = candidates[int(o)]
            qid = state.queue_by_ref.get(ref)
            if qid is None:
                qid = state._next_query_id
                state._next_query_id += 1
                pred = int(values[int(o)].argmax())
                state.queue[qid] = LabelQuery(
                    image_ref=ref, predicted_class=pred,
                    confidence=float(conf[int(o)]))
                state.queue_by_ref[ref] = qid
            q = state.queue[qid]
            out.append({"id": qid, "image_ref": q.image_ref,
                        "predicted_class": state.catalog.classes[q.predicted_class],
                        "confidence": q.confidence})
        return {"queries": out}

    @app.post("/label-queue/{query_id}")
    def submit_label(query_id: int, body: LabelBody):
        q = state.queue.get(query_id)
        if q is None:
            raise HTTPException(status_code=404, detail="unknown label query")
        if q.status != "pending":
            raise HTTPException(status_code=409,
                                detail=f"query already {q.status}")
        if body.skip:
            q.mark_skipped()
            return {"id": query_id, "status": q.status}
        if body.label is None:
            raise HTTPException(status_code=400, detail="label or skip required")
        if body.label not in state.catalog.classes:
            raise HTTPException(status_code=400,
                                detail=f"unknown class {body.label!r}")
        q.mark_labeled(state.catalog.classes.index(body.label),
                       len(state.catalog.classes))
        return {"id": query_id, "status": q.status, "label": body.label}

    # -- retraining ----------------------------------------------------------

    @app.post("/retrain")
    def retrain_endpoint():
        require_model()
        if not state.try_begin_retrain():
            raise HTTPException(status_code=409, detail="retrain in progress")
        try:
            labeled = [q for q in state.queue.values()
                       if q.status == "labeled"
                       and q.image_ref not in state.consumed_refs]
            X, refs = state.pool_features()
            base_X, base_y = state.base_features()
            if labeled:
                idx = np.array([refs.index(q.image_ref) for q in labeled])
                new_X = X[idx]
                new_y = np.array([q.label for q in labeled], dtype=np.int64)
            else:
                new_X, new_y = None, None
            new_model = retrain(state.model, base_X, base_y, new_X, new_y)
            for q in labeled:
                state.consumed_refs.add(q.image_ref)
            state.model = new_model
            state.model_version = _version_of(new_model)

            holdout = [i for i, r in enumerate(refs)
                       if r not in state.consumed_refs]
            accuracy = None
            if holdout:
                hi = np.array(holdout)
                preds, _ = classify.predict_batch(new_model, X[hi])
                truth = np.array([state.catalog.test_images[i][1] for i in holdout])
                accuracy = classify.evaluate(preds, truth,
                                             len(state.catalog.classes)).accuracy
            return {"model_version": state.model_version,
                    "labels_used": len(labeled),
                    "accuracy": accuracy}
        finally:
            state.end_retrain()

    return app
