"""Clients for face-recognition web APIs plus an offline mock provider.

Every request goes through the same path: serialize the image tensor to PNG
(or JPEG-q95) bytes, call the provider with retry/backoff, log a JSON line.
The mock provider decodes the uploaded bytes and scores them with a local
victim model, so the whole client path can be exercised offline.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .dataset import GalleryTrial, ImageStore, VerificationPairSet
from .evaluation import MetricsReport, Threshold, embedding_distance, roc_auc
from .facerec import embed_batch, model_fingerprint

log = logging.getLogger(__name__)

CAPABILITIES = frozenset({"compare_faces", "search_faces"})


class CloudError(RuntimeError):
    pass


class TransientError(CloudError):
    """Retryable failure (network error, throttling, 5xx)."""


class FaceNotFound(CloudError):
    pass


@dataclass(frozen=True)
class CompareResult:
    match: bool
    similarity: float
    face_found: bool = True


# --- serialization ------------------------------------------------------


def serialize_image(x: torch.Tensor, fmt: str = "png", quality: int = 95) -> bytes:
    """(3, H, W) float image in [0, 1] -> encoded bytes (8-bit quantized)."""
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    arr = (x.detach().cpu().double().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    if fmt == "png":
        Image.fromarray(arr).save(buf, format="PNG")
    elif fmt == "jpeg":
        Image.fromarray(arr).save(buf, format="JPEG", quality=quality)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    return buf.getvalue()


def deserialize_image(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def quantize(x: torch.Tensor) -> torch.Tensor:
    """What a lossless 8-bit upload sees: round to the nearest 1/255 step."""
    return ((x.double().clamp(0, 1) * 255.0).round() / 255.0).to(x.dtype)


# --- provider base ------------------------------------------------------


class FaceApiProvider:
    """Common request path: serialization, pacing, retry with backoff, JSONL log."""

    capabilities: frozenset = CAPABILITIES

    def __init__(self, name: str, match_threshold: float = 0.5, image_format: str = "png",
                 max_retries: int = 3, backoff: float = 1.0, delay: float = 0.0,
                 log_path: str | os.PathLike | None = None, sleep: Callable[[float], None] = time.sleep):
        if image_format not in ("png", "jpeg"):
            raise ValueError(f"unknown image format {image_format!r}")
        self.name = name
        self.match_threshold = match_threshold
        self.image_format = image_format
        self.max_retries = max_retries
        self.backoff = backoff
        self.delay = delay
        self.log_path = Path(log_path) if log_path else None
        self._sleep = sleep
        self._collections: dict[str, list[str]] = {}
        self.face_not_found = 0

    # subclass hooks operate on encoded bytes
    def _compare(self, a: bytes, b: bytes) -> float:
        raise NotImplementedError

    def _create_collection(self, collection_id: str, items: Sequence[tuple[str, bytes]]) -> None:
        raise NotImplementedError

    def _search(self, collection_id: str, probe: bytes, max_results: int) -> list[tuple[str, float]]:
        raise NotImplementedError

    def _require(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise CloudError(f"provider {self.name!r} does not support {capability}")

    def encode(self, x: torch.Tensor) -> bytes:
        return serialize_image(x, self.image_format)

    def _request(self, op: str, fn: Callable, payload: Sequence[bytes]):
        digests = [hashlib.sha1(b).hexdigest() for b in payload]
        for attempt in range(self.max_retries + 1):
            if self.delay:
                self._sleep(self.delay)
            t0 = time.perf_counter()
            try:
                result = fn()
            except TransientError as err:
                self._log(op, attempt, "retry" if attempt < self.max_retries else "error", t0, digests, str(err))
                if attempt == self.max_retries:
                    raise CloudError(f"{self.name} {op} failed after {attempt + 1} attempts: {err}") from err
                self._sleep(self.backoff * 2**attempt)
                continue
            except FaceNotFound as err:
                self._log(op, attempt, "face_not_found", t0, digests, str(err))
                raise
            self._log(op, attempt, "ok", t0, digests, result)
            return result

    def _log(self, op, attempt, status, t0, digests, response):
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        rec = {
            "time": time.time(), "provider": self.name, "op": op, "attempt": attempt, "status": status,
            "latency_s": time.perf_counter() - t0, "upload_sha1": digests, "response": response,
        }
        with open(self.log_path, "a") as f:
            f.write(json.dumps(rec, default=str) + "\n")

    # public API -----------------------------------------------------------

    def compare_faces(self, image_a: torch.Tensor, image_b: torch.Tensor) -> CompareResult:
        """Verdict at ``match_threshold`` plus the raw similarity.

        A face-not-found response is a non-match with ``face_found=False``.
        """
        self._require("compare_faces")
        a, b = self.encode(image_a), self.encode(image_b)
        try:
            sim = float(self._request("compare_faces", lambda: self._compare(a, b), (a, b)))
        except FaceNotFound:
            self.face_not_found += 1
            log.warning("%s: no face found in compare_faces request", self.name)
            return CompareResult(False, float("-inf"), face_found=False)
        return CompareResult(sim > self.match_threshold, sim)

    def register_gallery(self, collection_id: str, items: Iterable[tuple[str, torch.Tensor]]) -> None:
        """One-time ingestion of ``(id, image)`` pairs into a searchable collection."""
        self._require("search_faces")
        encoded = [(gid, self.encode(x)) for gid, x in items]
        if not encoded:
            raise CloudError("cannot register an empty gallery")
        self._request("register_gallery", lambda: self._create_collection(collection_id, encoded),
                      [b for _, b in encoded])
        self._collections[collection_id] = [gid for gid, _ in encoded]

    def search_faces(self, collection_id: str, probe: torch.Tensor,
                     max_results: int | None = None) -> list[tuple[str, float]]:
        """Gallery ids ranked by decreasing similarity; an empty list is a valid answer."""
        self._require("search_faces")
        if collection_id not in self._collections:
            raise CloudError(f"collection {collection_id!r} was not registered")
        n = max_results or len(self._collections[collection_id])
        data = self.encode(probe)
        try:
            return list(self._request("search_faces", lambda: self._search(collection_id, data, n), (data,)))
        except FaceNotFound:
            self.face_not_found += 1
            log.warning("%s: no face found in search_faces probe", self.name)
            return []


# --- mock ---------------------------------------------------------------


class MockProvider(FaceApiProvider):
    """Offline provider answering with a local victim model.

    Similarity is ``1 - d / (2 t)`` for cosine distance ``d`` and the model's
    clean EER distance ``t``, so the default 0.5 threshold reproduces the local
    decision ``d < t``. A constant image is reported as containing no face.
    """

    def __init__(self, model, threshold: Threshold, name: str = "mock", **kw):
        if threshold.model_fingerprint != model_fingerprint(model):
            raise CloudError("mock threshold was computed on a different model")
        if threshold.distance <= 0:
            raise CloudError("mock calibration needs a positive EER distance")
        super().__init__(name, **kw)
        self.model = model
        self.distance_threshold = threshold.distance
        self._galleries: dict[str, tuple[list[str], torch.Tensor]] = {}

    def _embed(self, data: bytes) -> torch.Tensor:
        x = deserialize_image(data)
        if float(x.std()) == 0.0:
            raise FaceNotFound("no face detected")
        return embed_batch(self.model, x.unsqueeze(0))[0]

    def _similarity(self, dist: torch.Tensor) -> torch.Tensor:
        return 1.0 - dist / (2.0 * self.distance_threshold)

    def _compare(self, a, b):
        ea, eb = self._embed(a), self._embed(b)
        return float(self._similarity(embedding_distance(ea, eb)))

    def _create_collection(self, collection_id, items):
        ids = [gid for gid, _ in items]
        x = torch.stack([deserialize_image(b) for _, b in items])
        self._galleries[collection_id] = (ids, embed_batch(self.model, x))

    def _search(self, collection_id, probe, max_results):
        ids, emb = self._galleries[collection_id]
        sim = self._similarity(embedding_distance(emb, self._embed(probe).unsqueeze(0)))
        order = sorted(range(len(ids)), key=lambda i: -float(sim[i]))  # stable: first index wins ties
        return [(ids[i], float(sim[i])) for i in order[:max_results]]


# --- AWS Rekognition ----------------------------------------------------


class AwsRekognitionProvider(FaceApiProvider):
    """CompareFaces / SearchFacesByImage. Credentials come from the standard AWS environment."""

    THROTTLE_CODES = {"ThrottlingException", "ProvisionedThroughputExceededException",
                      "InternalServerError", "ServiceUnavailableException"}

    def __init__(self, name: str = "aws", region: str | None = None, client=None, **kw):
        super().__init__(name, **kw)
        if client is None:
            import boto3  # optional dependency

            client = boto3.client("rekognition", region_name=region or os.environ.get("AWS_REGION"))
        self.client = client

    def _call(self, method, **params):
        try:
            return getattr(self.client, method)(**params)
        except Exception as err:
            code = getattr(err, "response", {}).get("Error", {}).get("Code", "")
            if code in self.THROTTLE_CODES or type(err).__name__ in ("EndpointConnectionError", "ConnectTimeoutError"):
                raise TransientError(f"{method}: {code or type(err).__name__}") from err
            if code == "InvalidParameterException" and "face" in str(err).lower():
                raise FaceNotFound(str(err)) from err
            raise CloudError(f"{method}: {err}") from err

    def _compare(self, a, b):
        resp = self._call("compare_faces", SourceImage={"Bytes": a}, TargetImage={"Bytes": b},
                          SimilarityThreshold=0.0)
        if not resp.get("FaceMatches") and not resp.get("UnmatchedFaces"):
            raise FaceNotFound("no face in target image")
        matches = resp.get("FaceMatches") or []
        return max((m["Similarity"] for m in matches), default=0.0) / 100.0

    def _create_collection(self, collection_id, items):
        self._call("create_collection", CollectionId=collection_id)
        for gid, data in items:
            self._call("index_faces", CollectionId=collection_id, Image={"Bytes": data},
                       ExternalImageId=gid, MaxFaces=1)

    def _search(self, collection_id, probe, max_results):
        resp = self._call("search_faces_by_image", CollectionId=collection_id, Image={"Bytes": probe},
                          MaxFaces=max_results, FaceMatchThreshold=0.0)
        return [(m["Face"]["ExternalImageId"], m["Similarity"] / 100.0) for m in resp.get("FaceMatches", [])]


# --- Azure Face ---------------------------------------------------------


class AzureFaceProvider(FaceApiProvider):
    """Face verify (face-to-face) and find-similar over a large face list, via REST."""

    def __init__(self, name: str = "azure", endpoint: str | None = None, key: str | None = None,
                 endpoint_env: str = "AZURE_FACE_ENDPOINT", key_env: str = "AZURE_FACE_KEY",
                 transport=None, timeout: float = 30.0, **kw):
        import httpx

        super().__init__(name, **kw)
        endpoint = endpoint or os.environ.get(endpoint_env)
        key = key or os.environ.get(key_env)
        if not endpoint or not key:
            raise CloudError(f"Azure credentials missing: set {endpoint_env} and {key_env}")
        self._httpx = httpx
        self.http = httpx.Client(base_url=endpoint.rstrip("/") + "/face/v1.0", transport=transport,
                                 headers={"Ocp-Apim-Subscription-Key": key}, timeout=timeout)
        self._persisted: dict[str, dict[str, str]] = {}

    def _post(self, path, **kw):
        try:
            resp = self.http.request(kw.pop("method", "POST"), path, **kw)
        except self._httpx.TransportError as err:
            raise TransientError(f"{path}: {err}") from err
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise CloudError(f"{path}: HTTP {resp.status_code} {resp.text}")
        return resp.json() if resp.content else None

    def _detect(self, data: bytes) -> str:
        faces = self._post("/detect", params={"returnFaceId": "true"}, content=data,
                           headers={"Content-Type": "application/octet-stream"})
        if not faces:
            raise FaceNotFound("detect returned no faces")
        return faces[0]["faceId"]

    def _compare(self, a, b):
        res = self._post("/verify", json={"faceId1": self._detect(a), "faceId2": self._detect(b)})
        return float(res["confidence"])

    def _create_collection(self, collection_id, items):
        self._post(f"/largefacelists/{collection_id}", method="PUT", json={"name": collection_id})
        mapping = {}
        for gid, data in items:
            res = self._post(f"/largefacelists/{collection_id}/persistedfaces", params={"userData": gid},
                             content=data, headers={"Content-Type": "application/octet-stream"})
            mapping[res["persistedFaceId"]] = gid
        self._post(f"/largefacelists/{collection_id}/train")
        self._persisted[collection_id] = mapping

    def _search(self, collection_id, probe, max_results):
        res = self._post("/findsimilars", json={
            "faceId": self._detect(probe), "largeFaceListId": collection_id,
            "maxNumOfCandidatesReturned": max_results, "mode": "matchFace",
        })
        mapping = self._persisted[collection_id]
        return [(mapping[r["persistedFaceId"]], float(r["confidence"])) for r in res]


def make_provider(cfg: dict, model=None, threshold: Threshold | None = None) -> FaceApiProvider:
    """Build a provider from a config mapping (``type`` in {mock, aws, azure})."""
    cfg = dict(cfg)
    kind = cfg.pop("type", cfg.get("name", "mock"))
    if kind == "mock":
        if model is None or threshold is None:
            raise CloudError("the mock provider needs a local model and its clean threshold")
        return MockProvider(model, threshold, **cfg)
    if kind == "aws":
        return AwsRekognitionProvider(**cfg)
    if kind == "azure":
        return AzureFaceProvider(**cfg)
    raise CloudError(f"unknown provider type {kind!r}")


# --- evaluation through a provider --------------------------------------


def _attacked(store: ImageStore, ids: Sequence[str], attack, batch_size=128) -> dict[str, torch.Tensor]:
    uniq = list(dict.fromkeys(ids))
    out = {}
    for i in range(0, len(uniq), batch_size):
        chunk = uniq[i : i + batch_size]
        x = store.load(chunk)
        if attack is not None:
            with torch.no_grad():
                x = attack(x)
        out.update(zip(chunk, x))
    return out


def cloud_verification_eval(provider: FaceApiProvider, pairs: VerificationPairSet, store: ImageStore,
                            attack=None) -> MetricsReport:
    """V-AUC from raw similarities, V-Acc / recall from the provider's match verdicts."""
    a_imgs = _attacked(store, [p.image_id_a for p in pairs.pairs], None)
    b_imgs = _attacked(store, [p.image_id_b for p in pairs.pairs], attack)
    results = [provider.compare_faces(a_imgs[p.image_id_a], b_imgs[p.image_id_b]) for p in pairs.pairs]
    labels = pairs.labels
    pred = np.array([r.match for r in results])
    report = MetricsReport(
        v_auc=roc_auc([r.similarity for r in results], labels),
        v_acc=100.0 * float((pred == labels).mean()),
        recall_pos=100.0 * float(pred[labels].mean()),
        n_pairs=len(labels),
        name=provider.name,
    )
    report.extra["face_not_found"] = sum(not r.face_found for r in results)
    return report


def cloud_identification_eval(provider: FaceApiProvider, trials: Sequence[GalleryTrial], store: ImageStore,
                              attack=None) -> float:
    """Rank-1 percent; each distinct gallery is registered once, probes are attacked."""
    if not trials:
        raise CloudError("no identification trials")
    clean = _attacked(store, [g for t in trials for g, _ in t.gallery], None)
    probes = _attacked(store, [t.probe_image_id for t in trials], attack)
    registered: dict[tuple, str] = {}
    hits = 0
    for t in trials:
        key = tuple(t.gallery)
        if key not in registered:
            cid = f"gallery-{uuid.uuid5(uuid.NAMESPACE_OID, repr(key)).hex[:12]}"
            provider.register_gallery(cid, [(ident, clean[g]) for g, ident in t.gallery])
            registered[key] = cid
        ranked = provider.search_faces(registered[key], probes[t.probe_image_id], max_results=1)
        hits += bool(ranked) and ranked[0][0] == t.probe_identity
    return 100.0 * hits / len(trials)
