"""Black-box target models: a trainable toy classifier, a query counter, and
a wire-protocol client for external model servers.

Every model exposes ``classify(Image) -> probability vector`` plus a label
count and a concurrency declaration; that probability vector is the only
channel of model knowledge the attack gets.
"""

from __future__ import annotations

import base64
import io
import threading
from dataclasses import dataclass, field

import numpy as np
import requests

from . import engine
from .engine import Tape, Tensor
from .imaging import Image, quantize_bytes

FEATURE_SIZE = 16  # classifier features are a 16x16 area-average of the image
# lexicographic, so labels match directory datasets written from these classes
CLASS_NAMES = (
    "checkerboard",
    "horizontal_stripes",
    "large_blobs",
    "radial_gradient",
    "uniform_speckle",
    "vertical_stripes",
)
PROB_SUM_TOL = 1e-5


def check_prob_vector(probs: np.ndarray, tol: float = PROB_SUM_TOL) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError(f"probability vector must be 1-D and nonempty, got {probs.shape}")
    if probs.min() < -tol or probs.max() > 1 + tol:
        raise ValueError("probabilities outside [0, 1]")
    if abs(probs.sum() - 1.0) > tol:
        raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
    return probs


def downsample_features(img: Image, out: int = FEATURE_SIZE) -> np.ndarray:
    """Area-average the image onto an out x out grid and flatten row-major.

    Rows and columns are partitioned into `out` contiguous bins (sizes differ
    by at most one pixel when the dimension is not divisible); each block
    contributes its mean. This keeps the classifier sensitive to exactly the
    spatial scales cloud masks occupy.
    """
    h, w, c = img.data.shape
    if h < out or w < out:
        raise ValueError(f"image {h}x{w} smaller than feature grid {out}x{out}")
    row_starts = (np.arange(out) * h) // out
    col_starts = (np.arange(out) * w) // out
    sums = np.add.reduceat(np.add.reduceat(img.data, row_starts, axis=0), col_starts, axis=1)
    row_counts = np.diff(np.append(row_starts, h))
    col_counts = np.diff(np.append(col_starts, w))
    means = sums / (row_counts[:, None, None] * col_counts[None, :, None])
    return means.reshape(-1)


@dataclass
class ToyClassifier:
    """Softmax regression over downsampled pixels. Deterministic and immutable
    after training, so classify is safe to call concurrently."""

    w: np.ndarray            # (FEATURE_SIZE^2 * 3, classes)
    b: np.ndarray            # (classes,)
    class_names: tuple
    train_loss: list = field(default_factory=list)

    concurrency = "safe"

    @property
    def label_count(self) -> int:
        return self.w.shape[1]

    def classify(self, img: Image) -> np.ndarray:
        x = downsample_features(img)
        return engine.softmax(x @ self.w + self.b)

    def save(self, path) -> None:
        np.savez(path, w=self.w, b=self.b, class_names=np.array(self.class_names))

    @classmethod
    def load(cls, path) -> "ToyClassifier":
        with np.load(path, allow_pickle=False) as data:
            return cls(w=data["w"], b=data["b"],
                       class_names=tuple(str(s) for s in data["class_names"]))


@dataclass
class SyntheticDataset:
    images: list
    labels: np.ndarray
    class_names: tuple
    seed: int


# Characteristic brightness band per class (aligned with CLASS_NAMES). The
# classes are keyed by their texture AND a brightness level; the bands sit
# close enough together that low-frequency brightness shifts (half-image
# brightening, cloud overlays) can carry an image across a class boundary,
# which is the fragility the attack exploits, while the tight within-class
# jitter keeps the classes cleanly separable.
CLASS_BANDS = (0.45, 0.25, 0.65, 0.55, 0.75, 0.35)


def _texture(class_idx: int, size: int, rng: np.random.Generator) -> np.ndarray:
    name = CLASS_NAMES[class_idx]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = CLASS_BANDS[class_idx] + rng.uniform(-0.02, 0.02) + rng.uniform(-0.015, 0.015, 3)
    amp = rng.uniform(0.06, 0.10)

    def colorize(s):
        return np.clip(base + amp * (2.0 * s[:, :, None] - 1.0), 0.0, 1.0)

    if name == "horizontal_stripes":  # canonical phase, 1.5 cycles per half
        return colorize(0.5 + 0.5 * np.cos(2 * np.pi * 3 * yy / size))
    if name == "vertical_stripes":
        return colorize(0.5 + 0.5 * np.cos(2 * np.pi * 3 * xx / size))
    if name == "checkerboard":  # 3x3 tiles, bright corners
        return colorize((((xx * 3 // size) + (yy * 3 // size)) % 2 == 0).astype(np.float64))
    if name == "radial_gradient":  # center biased above the middle
        cy = (0.42 + rng.uniform(-0.04, 0.04)) * size
        cx = (0.50 + rng.uniform(-0.06, 0.06)) * size
        r = np.hypot(yy - cy, xx - cx) / (0.75 * size)
        return colorize(np.clip(1.2 - 1.5 * r, 0.0, 1.0))
    if name == "large_blobs":  # anchored along the bottom
        s = np.full((size, size), 0.3)
        for ay, ax in ((0.72, 0.25), (0.76, 0.5), (0.72, 0.75)):
            cy = (ay + rng.uniform(-0.04, 0.04)) * size
            cx = (ax + rng.uniform(-0.04, 0.04)) * size
            sigma = rng.uniform(0.12, 0.16) * size
            s += 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        return colorize(np.clip(s, 0.0, 1.0))
    if name == "uniform_speckle":
        return colorize(rng.uniform(0.0, 1.0, (size, size)))
    raise ValueError(f"no texture class {class_idx}")


def synth_dataset(n_per_class: int, size: int = 64, seed: int = 0) -> SyntheticDataset:
    """Class-balanced procedural texture images, deterministic per seed.

    Values are snapped to the 8-bit lattice so in-memory images match their
    PNG round-trips exactly.
    """
    if n_per_class < 1:
        raise ValueError("need at least one image per class")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_per_class):
        for cls in range(len(CLASS_NAMES)):
            raw = np.clip(_texture(cls, size, rng), 0.0, 1.0)
            images.append(Image(quantize_bytes(raw) / 255.0))
            labels.append(cls)
    return SyntheticDataset(images=images, labels=np.array(labels),
                            class_names=CLASS_NAMES, seed=seed)


def toy_train(ds: SyntheticDataset, epochs: int = 120, lr: float = 0.1,
              seed: int = 0, batch_size: int = 32) -> ToyClassifier:
    """Mini-batch gradient descent on softmax cross-entropy.

    The first 10 epochs run at lr/10 to keep early descent stable; train_loss
    records the full-dataset loss after each epoch.
    """
    if not ds.images:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    feats = np.stack([downsample_features(img) for img in ds.images])
    labels = np.asarray(ds.labels)
    m = len(ds.class_names)
    dim = feats.shape[1]
    w = engine.uniform_init(rng, (dim, m), dim, dtype=np.float64)
    b = np.zeros(m, dtype=np.float64)

    losses = []
    n = len(feats)
    for epoch in range(epochs):
        step = lr / 10 if epoch < 10 else lr
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            wt, bt = Tensor(w), Tensor(b)
            logits = engine.fully_connected(Tensor(feats[idx]), wt, bt, tape)
            loss = engine.softmax_cross_entropy(logits, labels[idx], tape)
            tape.backward(loss)
            w = w - step * wt.grad
            b = b - step * bt.grad
        full = engine.softmax_cross_entropy(Tensor(feats @ w + b), labels)
        losses.append(float(full.data))
    return ToyClassifier(w=w, b=b, class_names=ds.class_names, train_loss=losses)


def toy_classify(clf: ToyClassifier, img: Image) -> np.ndarray:
    return check_prob_vector(clf.classify(img))


class CountingModel:
    """Wraps a model so every classify call bumps an exact, thread-safe counter."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()
        self._count = 0

    @property
    def queries(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def label_count(self) -> int:
        return self._inner.label_count

    @property
    def concurrency(self) -> str:
        return self._inner.concurrency

    def classify(self, img: Image) -> np.ndarray:
        with self._lock:
            self._count += 1
        return self._inner.classify(img)


def counting_wrapper(model) -> CountingModel:
    return CountingModel(model)


class RemoteModelError(Exception):
    retryable = False


class RemoteNetworkError(RemoteModelError):
    retryable = True


class RemoteTimeoutError(RemoteModelError):
    retryable = True


class RemoteProtocolError(RemoteModelError):
    retryable = False


class RemoteModel:
    """Client for the shared wire protocol (GET /health, GET /labels, POST /classify).

    Declares "serialize" concurrency by default since server threading is
    unknown; pass concurrency="safe" for endpoints known to handle parallel
    requests.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, concurrency: str = "serialize"):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.concurrency = concurrency
        self._labels = None

    def _get_json(self, path: str) -> dict:
        try:
            resp = requests.get(self.endpoint + path, timeout=self.timeout)
        except requests.Timeout as exc:
            raise RemoteTimeoutError(f"GET {path} timed out") from exc
        except requests.RequestException as exc:
            raise RemoteNetworkError(f"GET {path} failed: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteProtocolError(f"GET {path} returned {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise RemoteProtocolError(f"GET {path} returned non-JSON body") from exc

    @property
    def labels(self) -> list:
        if self._labels is None:
            body = self._get_json("/labels")
            labels = body.get("labels")
            if not isinstance(labels, list) or not labels:
                raise RemoteProtocolError("/labels body missing a nonempty 'labels' list")
            self._labels = [str(s) for s in labels]
        return self._labels

    @property
    def label_count(self) -> int:
        return len(self.labels)

    def classify(self, img: Image) -> np.ndarray:
        from PIL import Image as PILImage

        buf = io.BytesIO()
        PILImage.fromarray(quantize_bytes(img.data), mode="RGB").save(buf, format="PNG")
        payload = {"image_png_b64": base64.b64encode(buf.getvalue()).decode("ascii")}
        try:
            resp = requests.post(self.endpoint + "/classify", json=payload, timeout=self.timeout)
        except requests.Timeout as exc:
            raise RemoteTimeoutError("POST /classify timed out") from exc
        except requests.RequestException as exc:
            raise RemoteNetworkError(f"POST /classify failed: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteProtocolError(f"POST /classify returned {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise RemoteProtocolError("POST /classify returned non-JSON body") from exc
        probs = body.get("probs")
        if not isinstance(probs, list):
            raise RemoteProtocolError("/classify body missing 'probs' list")
        if len(probs) != self.label_count:
            raise RemoteProtocolError(
                f"server sent {len(probs)} probs but advertises {self.label_count} labels"
            )
        try:
            return check_prob_vector(np.asarray(probs, dtype=np.float64), tol=1e-3)
        except ValueError as exc:
            raise RemoteProtocolError(f"invalid probability vector: {exc}") from exc


def remote_classify(endpoint: str, img: Image) -> np.ndarray:
    """One-shot classification against a wire-protocol endpoint."""
    return RemoteModel(endpoint).classify(img)
