"""The wire-protocol service.

GET /health          -> {"status": "ok"}
GET /labels          -> {"labels": [...]}
POST /classify       -> {"probs": [...], "label": int}
  body: {"image_png_b64": base64 of an 8-bit RGB PNG}

Images are resized server-side to the model's expected input, keeping the
black-box boundary clean: the attacker never needs to know the input size.
Responses are validated against the protocol schema by a self-check
middleware on every request. Errors: 400 malformed body, 422 undecodable
image, 500 inference failure.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import threading
from dataclasses import dataclass

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image as PILImage

from .modelio import ModelBundle, load_bundle


@dataclass
class ServerConfig:
    weights: str
    port: int = 8787
    host: str = "127.0.0.1"
    deterministic: bool = True


def _decode_png(b64: str) -> PILImage.Image:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _BadBody(f"image_png_b64 is not valid base64: {exc}") from exc
    try:
        img = PILImage.open(io.BytesIO(raw))
        img.load()
        return img.convert("RGB")
    except Exception as exc:
        raise _BadImage(f"cannot decode image: {exc}") from exc


class _BadBody(Exception):
    pass


class _BadImage(Exception):
    pass


def _validate_protocol(path: str, payload: dict, label_count: int):
    """Self-check: raise if a response violates the wire protocol schema."""
    if path == "/health":
        assert payload.get("status") == "ok", "health body must be {'status':'ok'}"
    elif path == "/labels":
        labels = payload.get("labels")
        assert isinstance(labels, list) and labels, "labels must be a nonempty list"
        assert all(isinstance(s, str) for s in labels), "labels must be strings"
    elif path == "/classify":
        probs = payload.get("probs")
        assert isinstance(probs, list) and len(probs) == label_count, \
            "probs length must equal the label count"
        total = float(sum(probs))
        assert all(0.0 <= p <= 1.0 for p in probs), "probs must lie in [0,1]"
        assert abs(total - 1.0) < 1e-5, f"probs sum {total} != 1"
        assert payload.get("label") == int(np.argmax(probs)), "label must be argmax"


def create_app(bundle: ModelBundle, deterministic: bool = True) -> FastAPI:
    app = FastAPI(title="cloudattack model server")
    model = bundle.model
    model.eval()  # deterministic mode: all stochastic layers disabled
    lock = threading.Lock()  # torch module isn't guaranteed thread-safe

    @app.middleware("http")
    async def schema_self_check(request: Request, call_next):
        response = await call_next(request)
        if request.url.path in ("/health", "/labels", "/classify") \
                and response.status_code == 200:
            body = b"".join([chunk async for chunk in response.body_iterator])
            try:
                _validate_protocol(request.url.path, json.loads(body),
                                   len(bundle.labels))
            except AssertionError as exc:
                return JSONResponse({"error": f"protocol self-check failed: {exc}"},
                                    status_code=500)
            return JSONResponse(json.loads(body), status_code=200)
        return response

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/labels")
    def labels():
        return {"labels": bundle.labels}

    @app.post("/classify")
    async def classify(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict) or "image_png_b64" not in body:
            return JSONResponse({"error": "missing image_png_b64"}, status_code=400)
        try:
            pil = _decode_png(body["image_png_b64"])
        except _BadBody as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except _BadImage as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        try:
            size = bundle.input_size
            if pil.size != (size, size):
                pil = pil.resize((size, size), PILImage.BILINEAR)
            arr = np.asarray(pil, dtype=np.float32) / 255.0
            tensor = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
            with lock, torch.no_grad():
                if deterministic:
                    torch.manual_seed(0)
                logits = model(tensor)
                probs = torch.softmax(logits[0], dim=0).double()
            probs = (probs / probs.sum()).tolist()
            return {"probs": probs, "label": int(np.argmax(probs))}
        except Exception as exc:
            return JSONResponse({"error": f"inference failed: {exc}"},
                                status_code=500)

    return app


def serve(cfg: ServerConfig):
    """Load the bundle and run the service (blocking)."""
    import uvicorn

    bundle = load_bundle(cfg.weights)
    app = create_app(bundle, deterministic=cfg.deterministic)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
