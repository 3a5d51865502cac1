"""Deep adapted variation: ``p_{i+1} = CNN_i(p_i) - omega_i * A^T (A p_i - b)``.

One network and one scalar step size per unrolled iteration, trained stage by
stage with earlier stages frozen.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import operator as op
from .errors import (
    CompatibilityError,
    DivergenceError,
    MagicError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from .neural import (
    PARAM_ORDER,
    AdamState,
    ConvLayerSpec,
    ConvNet,
    adam_step,
    default_layer_specs,
    mse_loss,
)

log = logging.getLogger(__name__)

DAVM_MAGIC = b"DAVM"
DAVM_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 4e-4
    batch_size: int = 32
    seed: int = 0
    i_max: int = 3
    omega_init: float = 1.0
    width: int = 32
    depth: int = 5
    slope: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 for batch normalisation")
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if self.i_max < 0:
            raise UsageError("i_max must be >= 0")

    def layer_specs(self) -> list[ConvLayerSpec]:
        return default_layer_specs(self.width, self.depth, self.slope)


@dataclass
class DavModel:
    nets: list[ConvNet]
    omegas: list[float]
    geometry_fingerprint: str
    training_log: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.nets) != len(self.omegas):
            raise UsageError("need one step size per network")
        if not all(math.isfinite(w) for w in self.omegas):
            raise UsageError("step sizes must be finite")

    @property
    def i_max(self) -> int:
        return len(self.nets)


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


# -- inference ------------------------------------------------------------------


def dav_init(A: op.SystemMatrix, b: np.ndarray) -> np.ndarray:
    return op.apply_adjoint(A, b)


def apply_cnn(net: ConvNet, p: np.ndarray) -> np.ndarray:
    """Run ``net`` on an image or stack of images; returns float64 of the same shape."""
    p = np.asarray(p)
    if p.ndim not in (2, 3):
        raise ShapeError(f"expected an image or image stack, got shape {p.shape}")
    batch = p.reshape((-1, 1) + p.shape[-2:])
    return net.forward(batch).astype(np.float64).reshape(p.shape)


def dav_step(net: ConvNet, omega: float, A: op.SystemMatrix, p: np.ndarray, b: np.ndarray) -> np.ndarray:
    """One unrolled iteration.  The network sees ``p`` only; the data-consistency
    gradient is added afterwards with weight ``-omega``."""
    if net.mode != "eval":
        raise UsageError("inference requires the network in eval mode")
    out = apply_cnn(net, p)
    if omega == 0:
        return out
    return out - omega * op.data_consistency_gradient(A, p, b)


def dav_reconstruct(model: DavModel, A: op.SystemMatrix, b: np.ndarray, return_iterates: bool = False):
    """Run all stages from ``p_1 = A^T b``.

    With ``return_iterates`` the list ``[p_1, ..., p_{i_max + 1}]`` is returned.
    """
    if model.geometry_fingerprint != A.geometry_fingerprint:
        raise CompatibilityError(
            f"model was trained for geometry {model.geometry_fingerprint}, "
            f"operator is {A.geometry_fingerprint}"
        )
    p = dav_init(A, b)
    iterates = [p]
    for net, omega in zip(model.nets, model.omegas):
        p = dav_step(net, omega, A, p, b)
        iterates.append(p)
    return iterates if return_iterates else p


# -- training ---------------------------------------------------------------------


def precompute_stage_inputs(model_so_far: DavModel | None, sinograms: np.ndarray, A: op.SystemMatrix,
                            chunk: int = 64, cached=None):
    """Stage inputs ``p_i`` and gradients ``A^T (A p_i - b)`` for every sample.

    ``model_so_far`` holds the already trained (frozen) stages.  ``cached`` may
    carry ``(p, g)`` for the stage before the last one in ``model_so_far``, in
    which case only the last stage is applied.
    """
    sinograms = np.asarray(sinograms, dtype=np.float64)
    nets = [] if model_so_far is None else list(zip(model_so_far.nets, model_so_far.omegas))
    ps, gs = [], []
    for start in range(0, len(sinograms), chunk):
        b = sinograms[start : start + chunk]
        if cached is not None and nets:
            p = cached[0][start : start + chunk]
            g = cached[1][start : start + chunk]
            net, omega = nets[-1]
            p = apply_cnn(net, p) - omega * g
        else:
            p = dav_init(A, b)
            for net, omega in nets:
                p = dav_step(net, omega, A, p, b)
        ps.append(p)
        gs.append(op.data_consistency_gradient(A, p, b))
    shape = (0,) + A.image_shape
    return (np.concatenate(ps) if ps else np.zeros(shape),
            np.concatenate(gs) if gs else np.zeros(shape))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample; fold a lone remainder back in
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train_dav_stage(stage_index: int, stage_inputs, ground_truths: np.ndarray, config: TrainConfig,
                    net: ConvNet | None = None, omega: float | None = None):
    """Fit ``CNN_i`` and ``omega_i`` so that ``CNN_i(p_i) - omega_i g_i`` matches the ground truth.

    Returns ``(net, omega, epoch_losses)`` with the network in eval mode.
    """
    p_in, g_in = stage_inputs
    n = len(p_in)
    if n < 2:
        raise UsageError("stage training needs at least 2 samples")
    if net is None:
        net = ConvNet.create(config.layer_specs(), seed=_stage_seed(config.seed, stage_index))
    else:
        net = net.copy()
    omega_arr = np.array(config.omega_init if omega is None else omega, dtype=np.float64)
    if config.epochs == 0:
        return net.eval(), float(omega_arr), []

    dtype = net.dtype
    p32 = p_in.astype(dtype)[:, None]
    g32 = g_in.astype(dtype)[:, None]
    gt32 = np.asarray(ground_truths, dtype=dtype)[:, None]
    params = net.parameters() + [omega_arr]
    state = AdamState.for_params(params)
    rng = np.random.default_rng(_stage_seed(config.seed, 1000 + stage_index))
    net.train()
    history = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in _batches(n, config.batch_size, rng):
            out = net.forward(p32[idx])
            pred = out - dtype.type(omega_arr) * g32[idx]
            loss, dpred = mse_loss(pred, gt32[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"stage {stage_index}: loss became non-finite in epoch {epoch}", index=epoch)
            _, grads = net.backward(dpred, input_grad=False)
            domega = -np.vdot(dpred.astype(np.float64), g32[idx].astype(np.float64))
            adam_step(params, grads + [np.array(domega)], state, config.learning_rate)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("stage %d epoch %d loss %.6g omega %.4g", stage_index, epoch, history[-1], float(omega_arr))
    return net.eval(), float(omega_arr), history


def train_dav_layerwise(dataset, A: op.SystemMatrix, config: TrainConfig, progress=None) -> DavModel:
    """Train ``config.i_max`` stages one after another.

    After each stage the held-out split is pushed through the model so far and
    scored; the rows (one per iteration) land in ``model.training_log``.
    """
    from .metrics import evaluate_images

    if A.geometry_fingerprint != dataset.geometry.fingerprint:
        raise CompatibilityError("operator and dataset geometries differ")
    train_idx = dataset.train_indices()
    test_idx = dataset.test_indices()
    if set(train_idx) & set(test_idx):
        raise UsageError("train and test splits overlap")
    b_train = dataset.sinograms[train_idx]
    gt_train = dataset.phantoms[train_idx]
    b_test = dataset.sinograms[test_idx]
    gt_test = dataset.phantoms[test_idx]

    model = DavModel([], [], A.geometry_fingerprint)
    train_cache = test_cache = None
    stage_rows = []
    losses = []
    for stage in range(1, config.i_max + 1):
        train_cache = precompute_stage_inputs(model, b_train, A, cached=train_cache)
        net, omega, history = train_dav_stage(stage, train_cache, gt_train, config)
        model.nets.append(net)
        model.omegas.append(omega)
        losses.append(history)
        if len(test_idx):
            test_cache = precompute_stage_inputs(model, b_test, A, cached=test_cache)
            # test_cache now holds p_{stage+1}
            row = evaluate_images(gt_test, test_cache[0])
            row["iteration"] = stage
            row["omega"] = omega
            stage_rows.append(row)
            if progress:
                progress(f"stage {stage}: omega={omega:.4f} held-out SSIM={row['ssim_mean']:.4f} "
                         f"PSNR={row['psnr_mean']:.2f}")
        elif progress:
            progress(f"stage {stage}: omega={omega:.4f} final loss={history[-1] if history else float('nan'):.4g}")
    model.training_log = {"stage_metrics": stage_rows, "epoch_losses": losses}
    return model


# -- model file -------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_model(model: DavModel, path, dtype: str = "f32") -> None:
    """Write the DAVM container: magic, version, JSON header, raw parameter blobs."""
    if dtype not in _DTYPES:
        raise UsageError(f"unsupported model dtype {dtype!r}")
    header = {
        "i_max": model.i_max,
        "layers": [[s.to_dict() for s in net.specs] for net in model.nets],
        "omegas": [float(w) for w in model.omegas],
        "geometry_fingerprint": model.geometry_fingerprint,
        "dtype": dtype,
        "bn_momentum": [net.momentum for net in model.nets],
        "bn_eps": [net.bn_eps for net in model.nets],
        "training_log": model.training_log,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DAVM_MAGIC)
        fh.write(struct.pack("<II", DAVM_VERSION, len(blob)))
        fh.write(blob)
        for net in model.nets:
            for layer in net.layers:
                for name in PARAM_ORDER:
                    if name in layer:
                        fh.write(np.ascontiguousarray(layer[name], dtype=_DTYPES[dtype]).tobytes())


def load_model(path) -> DavModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DAVM_MAGIC:
        raise MagicError(f"{path}: not a DAVM model file")
    if len(raw) < 12:
        raise TruncationError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != DAVM_VERSION:
        raise VersionError(f"{path}: unsupported DAVM version {version}")
    if len(raw) < 12 + hlen:
        raise TruncationError(f"{path}: truncated header")
    header = json.loads(raw[12 : 12 + hlen])
    dt = _DTYPES[header["dtype"]]
    native = np.dtype(dt.newbyteorder("="))
    off = 12 + hlen
    nets = []
    for k, layer_specs in enumerate(header["layers"]):
        specs = [ConvLayerSpec(**d) for d in layer_specs]
        layers = []
        for s in specs:
            shapes = {
                "weight": (s.out_channels, s.in_channels, s.kernel_size, s.kernel_size),
                "bias": (s.out_channels,),
            }
            if s.has_batchnorm:
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    shapes[name] = (s.out_channels,)
            layer = {}
            for name in PARAM_ORDER:
                if name not in shapes:
                    continue
                count = int(np.prod(shapes[name]))
                nbytes = count * dt.itemsize
                if off + nbytes > len(raw):
                    raise TruncationError(f"{path}: parameter data ends early")
                layer[name] = np.frombuffer(raw, dt, count, off).astype(native).reshape(shapes[name])
                off += nbytes
            layers.append(layer)
        net = ConvNet(specs, layers, mode="eval", dtype=native,
                      momentum=header["bn_momentum"][k], bn_eps=header["bn_eps"][k])
        nets.append(net)
    if off != len(raw):
        raise TruncationError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return DavModel(nets, [float(w) for w in header["omegas"]], header["geometry_fingerprint"],
                    header.get("training_log", {}))
