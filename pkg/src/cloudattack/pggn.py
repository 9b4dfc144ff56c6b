"""Gradient-grid generator network and its adversarial training.

The generator maps a latent vector to five gradient grids of increasing
resolution: a fully connected layer lifts the latent to a 3x3x128 feature,
then five stride-2 deconvolution stages double the spatial size while
halving the channel count (128 -> 64 -> 32 -> 16 -> 8 -> 2). The last two
channels of every stage's activated output, squashed by tanh, form the grid
at that scale, giving vertex sizes 5, 9, 17, 33, 65 (cell counts 4..64).

The discriminator consumes the grids largest-first: each stride-2 conv
halves the spatial size, after which the next smaller grid is concatenated
onto the feature map, ending in a fully connected sigmoid scalar.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import AdamState, Tape, Tensor, adam_step, uniform_init
from .perlin import GradientGrid, random_unit_grid

GEN_CHANNELS = (128, 64, 32, 16, 8, 2)
VERTEX_SIZES = (5, 9, 17, 33, 65)
CELL_COUNTS = (4, 8, 16, 32, 64)
DISC_CHANNELS = (16, 32, 64, 128, 130)
WEIGHT_MAGIC = b"PGGN"
WEIGHT_VERSION = 1
LEAKY_SLOPE = 0.2


class WeightFileError(Exception):
    """Base class for weight (de)serialization failures."""


class WeightFormatError(WeightFileError):
    """Bad magic, truncation, or malformed manifest."""


class WeightVersionError(WeightFileError):
    """File written by an incompatible format version."""


class WeightChecksumError(WeightFileError):
    """Trailing CRC32 does not match the payload."""


class TrainingDivergedError(Exception):
    """A loss became NaN during adversarial training."""


@dataclass(frozen=True)
class GridSet:
    """Five gradient grids with vertex sizes 5, 9, 17, 33, 65, smallest first."""

    grids: tuple

    def __post_init__(self):
        if len(self.grids) != 5:
            raise ValueError(f"expected 5 grids, got {len(self.grids)}")
        for grid, size in zip(self.grids, VERTEX_SIZES):
            if grid.vectors.shape[0] != size:
                raise ValueError(
                    f"grid vertex size {grid.vectors.shape[0]}, expected {size}"
                )
            if np.abs(grid.vectors).max() > 1.0 + 1e-6:
                raise ValueError("grid components must lie in [-1, 1]")


@dataclass
class GeneratorWeights:
    q: int
    fc_w: np.ndarray
    fc_b: np.ndarray
    kernels: list
    biases: list

    @classmethod
    def random_init(cls, q: int = 52, seed: int = 0, dtype=np.float32) -> "GeneratorWeights":
        rng = np.random.default_rng(seed)
        fc_out = GEN_CHANNELS[0] * 3 * 3
        fc_w = uniform_init(rng, (q, fc_out), q, dtype)
        fc_b = np.zeros(fc_out, dtype=dtype)
        kernels, biases = [], []
        for c_in, c_out in zip(GEN_CHANNELS[:-1], GEN_CHANNELS[1:]):
            kernels.append(uniform_init(rng, (c_in, c_out, 3, 3), c_in * 9, dtype))
            biases.append(np.zeros(c_out, dtype=dtype))
        return cls(q=q, fc_w=fc_w, fc_b=fc_b, kernels=kernels, biases=biases)

    def param_arrays(self):
        out = [self.fc_w, self.fc_b]
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out

    def replace_params(self, arrays):
        self.fc_w, self.fc_b = arrays[0], arrays[1]
        for i in range(5):
            self.kernels[i] = arrays[2 + 2 * i]
            self.biases[i] = arrays[3 + 2 * i]

    def param_names(self):
        names = ["fc_w", "fc_b"]
        for i in range(1, 6):
            names += [f"deconv{i}.k", f"deconv{i}.b"]
        return names


@dataclass
class DiscriminatorWeights:
    kernels: list
    biases: list
    fc_w: np.ndarray
    fc_b: np.ndarray

    @classmethod
    def random_init(cls, seed: int = 0, dtype=np.float32) -> "DiscriminatorWeights":
        rng = np.random.default_rng(seed)
        kernels, biases = [], []
        c_in = 2
        for c_out in DISC_CHANNELS:
            kernels.append(uniform_init(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
            biases.append(np.zeros(c_out, dtype=dtype))
            c_in = c_out + 2  # the next smaller grid is concatenated after each conv
        flat = DISC_CHANNELS[-1] * 3 * 3
        fc_w = uniform_init(rng, (flat, 1), flat, dtype)
        fc_b = np.zeros(1, dtype=dtype)
        return cls(kernels=kernels, biases=biases, fc_w=fc_w, fc_b=fc_b)

    def param_arrays(self):
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        out += [self.fc_w, self.fc_b]
        return out

    def replace_params(self, arrays):
        for i in range(5):
            self.kernels[i] = arrays[2 * i]
            self.biases[i] = arrays[2 * i + 1]
        self.fc_w, self.fc_b = arrays[10], arrays[11]

    def param_names(self):
        names = []
        for i in range(1, 6):
            names += [f"conv{i}.k", f"conv{i}.b"]
        return names + ["fc_w", "fc_b"]


@dataclass(frozen=True)
class TrainConfig:
    grids_per_size: int = 500
    epochs: int = 50
    batch_size: int = 100  # desk-scale calibration: see train() docstring
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    q: int = 52
    seed: int = 0
    saturating: bool = False  # True = literal generator objective, which stalls early
    gen_steps_per_batch: int = 1  # generator updates per discriminator update

    def __post_init__(self):
        for name in ("grids_per_size", "epochs", "batch_size", "q",
                     "gen_steps_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# Forward passes (batched, on weight tensors created per step)


def _generator_forward(z: Tensor, wts, tape: Tape | None):
    """z (B, q) -> list of 5 grid tensors (B, 2, s, s), smallest first."""
    bsz = z.data.shape[0]
    h = engine.fully_connected(z, wts[0], wts[1], tape)
    h = engine.leaky_relu(h, LEAKY_SLOPE, tape)
    h = engine.reshape(h, (bsz, GEN_CHANNELS[0], 3, 3), tape)
    grids = []
    for i in range(5):
        raw = engine.deconv2d(h, wts[2 + 2 * i], stride=2, padding=1, b=wts[3 + 2 * i], tape=tape)
        c_out = GEN_CHANNELS[i + 1]
        if c_out == 2:
            grid = engine.tanh(raw, tape)
            h = grid
        else:
            rest = engine.leaky_relu(engine.slice_channels(raw, 0, c_out - 2, tape), LEAKY_SLOPE, tape)
            grid = engine.tanh(engine.slice_channels(raw, c_out - 2, c_out, tape), tape)
            h = engine.concat_channels(rest, grid, tape)
        grids.append(grid)
    return grids


def _discriminator_forward(grids, wts, tape: Tape | None) -> Tensor:
    """grids: list of 5 tensors (B, 2, s, s) smallest first -> (B, 1) logits.

    Training consumes the logits through the stable BCE; apply sigmoid for
    the probability contract.
    """
    h = grids[4]
    for i in range(5):
        h = engine.conv2d(h, wts[2 * i], stride=2, padding=1, b=wts[2 * i + 1], tape=tape)
        h = engine.leaky_relu(h, LEAKY_SLOPE, tape)
        if i < 4:
            h = engine.concat_channels(h, grids[3 - i], tape)
    bsz = h.data.shape[0]
    flat = engine.reshape(h, (bsz, DISC_CHANNELS[-1] * 9), tape)
    return engine.fully_connected(flat, wts[10], wts[11], tape)


def _grids_to_gridset(arrays) -> GridSet:
    """Stage outputs (2, s, s) -> GradientGrids; channel 0/1 are the x/y planes."""
    grids = []
    for arr in arrays:
        vectors = np.stack([arr[0], arr[1]], axis=-1).astype(np.float64)
        grids.append(GradientGrid(vectors))
    return GridSet(tuple(grids))


def _gridset_to_arrays(gs: GridSet, dtype=np.float32):
    """Inverse of _grids_to_gridset, one (2, s, s) array per scale."""
    return [np.stack([g.vectors[..., 0], g.vectors[..., 1]]).astype(dtype) for g in gs.grids]


def generate(z: np.ndarray, w: GeneratorWeights) -> GridSet:
    """Map a latent vector in [-1, 1]^q to its five gradient grids."""
    z = np.asarray(z, dtype=w.fc_w.dtype).reshape(-1)
    if z.shape[0] != w.q:
        raise ValueError(f"latent dimension {z.shape[0]} != generator q={w.q}")
    wts = [Tensor(a) for a in w.param_arrays()]
    grids = _generator_forward(Tensor(z[None, :]), wts, tape=None)
    return _grids_to_gridset([g.data[0] for g in grids])


def discriminate(f: GridSet, w: DiscriminatorWeights) -> float:
    """Probability that the grid set is real."""
    arrays = _gridset_to_arrays(f, dtype=w.fc_w.dtype)
    wts = [Tensor(a) for a in w.param_arrays()]
    tensors = [Tensor(a[None]) for a in arrays]
    logits = _discriminator_forward(tensors, wts, tape=None)
    return float(engine.sigmoid(logits).data[0, 0])


def sample_real_gridset(seed) -> GridSet:
    """Five classical unit-vector grids at the five scales."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return GridSet(tuple(random_unit_grid(n, rng) for n in CELL_COUNTS))


# ---------------------------------------------------------------------------
# Training


def _sample_real_batch(rng: np.random.Generator, count: int, dtype=np.float32):
    """(count, 2, s, s) arrays of unit gradient vectors per scale."""
    out = []
    for size in VERTEX_SIZES:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(count, size, size))
        out.append(np.stack([np.cos(theta), np.sin(theta)], axis=1).astype(dtype))
    return out


def train(cfg: TrainConfig):
    """Alternate one discriminator and gen_steps_per_batch generator Adam
    steps per batch.

    The discriminator maximizes log D(real) + log(1 - D(fake)); the generator
    by default maximizes log D(fake) (the non-saturating form, same optimum as
    minimizing log(1 - D(fake)) but with usable early gradients). Both
    objectives are computed from logits so gradients survive discriminator
    saturation. Returns the trained weights and one (d_loss, g_loss) record
    per epoch.

    The default batch size of 100 places the 50-epoch desk-scale run's
    endpoint where generated component statistics match classical grids
    (mean ~0, std ~1/sqrt(2)); smaller batches take more steps and overshoot
    into larger-magnitude outputs before the adversarial pressure reverses.
    """
    rng = np.random.default_rng(cfg.seed)
    gen_w = GeneratorWeights.random_init(cfg.q, seed=int(rng.integers(2**31)))
    disc_w = DiscriminatorWeights.random_init(seed=int(rng.integers(2**31)))
    gen_state = AdamState.for_params(gen_w.param_arrays(), lr=cfg.lr,
                                     beta1=cfg.beta1, beta2=cfg.beta2)
    disc_state = AdamState.for_params(disc_w.param_arrays(), lr=cfg.lr,
                                      beta1=cfg.beta1, beta2=cfg.beta2)

    reals = _sample_real_batch(rng, cfg.grids_per_size)
    n = cfg.grids_per_size
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        d_losses, g_losses = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bsz = len(idx)
            real_t = [Tensor(r[idx]) for r in reals]

            # discriminator step (generator frozen: forward without tape)
            z = rng.uniform(-1.0, 1.0, (bsz, cfg.q)).astype(np.float32)
            gw_t = [Tensor(a) for a in gen_w.param_arrays()]
            fake = _generator_forward(Tensor(z), gw_t, tape=None)
            fake_t = [Tensor(g.data) for g in fake]
            tape = Tape()
            dw_t = [Tensor(a) for a in disc_w.param_arrays()]
            d_real = _discriminator_forward(real_t, dw_t, tape)
            d_fake = _discriminator_forward(fake_t, dw_t, tape)
            loss_d = engine.add(engine.bce_with_logits(d_real, 1.0, tape),
                                engine.bce_with_logits(d_fake, 0.0, tape), tape)
            tape.backward(loss_d)
            disc_w.replace_params(adam_step(disc_w.param_arrays(),
                                            [t.grad for t in dw_t], disc_state))

            # generator steps (discriminator weights get gradients we discard)
            for _ in range(cfg.gen_steps_per_batch):
                z = rng.uniform(-1.0, 1.0, (bsz, cfg.q)).astype(np.float32)
                tape = Tape()
                gw_t = [Tensor(a) for a in gen_w.param_arrays()]
                dw_t = [Tensor(a) for a in disc_w.param_arrays()]
                fake = _generator_forward(Tensor(z), gw_t, tape)
                d_out = _discriminator_forward(fake, dw_t, tape)
                if cfg.saturating:
                    loss_g = engine.scale(engine.bce_with_logits(d_out, 0.0, tape),
                                          -1.0, tape)
                else:
                    loss_g = engine.bce_with_logits(d_out, 1.0, tape)
                tape.backward(loss_g)
                gen_w.replace_params(adam_step(gen_w.param_arrays(),
                                               [t.grad for t in gw_t], gen_state))

            d_val, g_val = float(loss_d.data), float(loss_g.data)
            if np.isnan(d_val) or np.isnan(g_val):
                raise TrainingDivergedError(
                    f"NaN loss at epoch {epoch}, batch start {start}: "
                    f"d_loss={d_val}, g_loss={g_val}"
                )
            d_losses.append(d_val)
            g_losses.append(g_val)
        history.append({"d_loss": float(np.mean(d_losses)),
                        "g_loss": float(np.mean(g_losses))})
    return gen_w, disc_w, history


# ---------------------------------------------------------------------------
# Weight serialization: magic, version, JSON manifest, little-endian float32
# payload, trailing CRC32. Round-trips must be byte-identical.


def _weights_kind(w) -> str:
    if isinstance(w, GeneratorWeights):
        return "generator"
    if isinstance(w, DiscriminatorWeights):
        return "discriminator"
    raise TypeError(f"cannot serialize {type(w).__name__}")


def save_weights(w, path) -> None:
    kind = _weights_kind(w)
    arrays = [np.ascontiguousarray(a, dtype="<f4") for a in w.param_arrays()]
    entries = []
    offset = 0
    for name, arr in zip(w.param_names(), arrays):
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = {"kind": kind, "entries": entries}
    if kind == "generator":
        manifest["q"] = w.q
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = WEIGHT_MAGIC + struct.pack("<HI", WEIGHT_VERSION, len(blob)) + blob
    body += b"".join(arr.tobytes() for arr in arrays)
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


def load_weights(path):
    with open(path, "rb") as fh:
        body = fh.read()
    if len(body) < 14:
        raise WeightFormatError(f"{path}: truncated weight file")
    if body[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes")
    (crc,) = struct.unpack("<I", body[-4:])
    if zlib.crc32(body[:-4]) != crc:
        raise WeightChecksumError(f"{path}: CRC mismatch")
    version, blob_len = struct.unpack("<HI", body[4:10])
    if version != WEIGHT_VERSION:
        raise WeightVersionError(f"{path}: version {version}, expected {WEIGHT_VERSION}")
    try:
        manifest = json.loads(body[10:10 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: malformed manifest") from exc
    data = body[10 + blob_len:-4]
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise WeightFormatError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()
    try:
        if manifest["kind"] == "generator":
            return GeneratorWeights(
                q=int(manifest["q"]),
                fc_w=arrays["fc_w"], fc_b=arrays["fc_b"],
                kernels=[arrays[f"deconv{i}.k"] for i in range(1, 6)],
                biases=[arrays[f"deconv{i}.b"] for i in range(1, 6)],
            )
        if manifest["kind"] == "discriminator":
            return DiscriminatorWeights(
                kernels=[arrays[f"conv{i}.k"] for i in range(1, 6)],
                biases=[arrays[f"conv{i}.b"] for i in range(1, 6)],
                fc_w=arrays["fc_w"], fc_b=arrays["fc_b"],
            )
    except KeyError as exc:
        raise WeightFormatError(f"{path}: manifest missing array {exc}") from exc
    raise WeightFormatError(f"{path}: unknown weight kind {manifest['kind']!r}")
