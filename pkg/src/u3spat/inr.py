"""Sinusoidal coordinate network and its self-supervised training.

The network maps normalised pixel coordinates in [0, 1)^2 to one intensity.
Gradients are accumulated by hand (reverse mode through the sine layers),
which keeps the whole training loop in numpy and bitwise reproducible.
"""

from __future__ import annotations

import copy
import hashlib
from concurrent.futures import ProcessPoolExecutor
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import ScheduleError, SpiralSchedule
from .physics import ForwardOperator, ImageGrid, Sinogram

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration
        self.loss = loss


class NoOptimizationError(ValueError):
    pass


class CoordinateDomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class CoordinateNetwork:
    """Sine-activated MLP ``[2] -> width x (depth - 1) -> [1]``.

    ``weights[l]`` has shape (n_in, n_out). Every layer but the last applies
    ``sin(omega0 * (a @ W + b))``; the last layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    omega0: float = 30.0
    seed: int = 0

    @classmethod
    def create(
        cls,
        depth: int = 4,
        width: int = 512,
        omega0: float = 30.0,
        seed: int = 0,
        dtype=np.float32,
    ) -> "CoordinateNetwork":
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        rng = np.random.default_rng(seed)
        dims = [2] + [width] * (depth - 1) + [1]
        weights, biases = [], []
        for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            if layer == 0:
                bound = 1.0 / n_in
            else:
                bound = np.sqrt(6.0 / n_in) / omega0
            weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
            b_bound = 1.0 / np.sqrt(n_in)
            biases.append(rng.uniform(-b_bound, b_bound, size=n_out).astype(dtype))
        return cls(weights, biases, float(omega0), int(seed))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W1, b1, W2, b2, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "CoordinateNetwork":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "CoordinateNetwork":
        return CoordinateNetwork(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.omega0,
            self.seed,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def forward(self, coords: np.ndarray, keep: bool = False):
        """Evaluate at ``coords`` (N, 2); with ``keep`` also return the tape."""
        a = np.asarray(coords, dtype=self.dtype)
        tape = [a]
        L = self.depth
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if layer < L - 1:
                z *= self.omega0
                a = np.sin(z)
                if keep:
                    tape.append(z)
                    tape.append(a)
            else:
                a = z
        out = a[:, 0]
        return (out, tape) if keep else out

    def backward(self, tape: list, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` in ``params()`` order."""
        L = self.depth
        g = np.asarray(grad_out, dtype=self.dtype)[:, None]
        grads: list[np.ndarray] = [None] * (2 * L)  # type: ignore[list-item]
        for layer in range(L - 1, -1, -1):
            a_prev = tape[0] if layer == 0 else tape[2 * layer]
            grads[2 * layer] = a_prev.T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            if layer > 0:
                d = np.cos(tape[2 * layer - 1])
                d *= self.omega0
                d *= g @ self.weights[layer].T
                g = d
        return grads


def evaluate(net: CoordinateNetwork, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise CoordinateDomainError(f"coords must have shape (N, 2), got {coords.shape}")
    if np.any(coords < 0) or np.any(coords >= 1):
        raise CoordinateDomainError("coordinates must lie in [0, 1)^2")
    return net.forward(coords)


def infer(net: CoordinateNetwork, grid: ImageGrid, clamp: bool = True) -> np.ndarray:
    """Network image on the pixel-centre grid, negatives clamped to zero."""
    img = net.forward(grid.normalized_coords()).reshape(grid.shape).astype(np.float64)
    if clamp:
        neg = int(np.count_nonzero(img < 0))
        if neg:
            log.debug("infer: clamped %d negative pixels (min %.3g)", neg, img.min())
        img = np.maximum(img, 0.0)
    return img


@dataclass
class TrainingConfig:
    iterations: int = 2000
    lr_embed: float = 1e-4
    lr_reconstruct: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    delta: float = 0.8
    seed: int = 0
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr_embed <= 0 or self.lr_reconstruct <= 0:
            raise ValueError("learning rates must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.reshape(p.shape).astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class TrainResult:
    net: CoordinateNetwork
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def optimize(
    net: CoordinateNetwork,
    coords: np.ndarray,
    image_loss: LossFn,
    iterations: int,
    lr: float,
    cfg: TrainingConfig,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> TrainResult:
    """Adam on ``image_loss(network image) -> (loss, d loss / d image)``.

    ``net`` is trained in place; the returned trace holds the loss before
    each update plus the loss after the last one. ``callback(it, output)``
    sees the network output before every update.
    """
    opt = Adam(net.params(), lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses: list[float] = []
    initial = None
    for it in range(iterations + 1):
        out, tape = net.forward(coords, keep=True)
        loss, g_img = image_loss(out.astype(np.float64))
        if not np.isfinite(loss) or (
            initial is not None and initial > 0 and loss > cfg.divergence_factor * initial
        ):
            raise DivergenceError(it, loss)
        if initial is None:
            initial = loss
        losses.append(float(loss))
        if callback is not None:
            callback(it, out)
        if it == iterations:
            break
        opt.step(net.backward(tape, g_img))
    return TrainResult(net, losses)


def embedding_loss(target: np.ndarray) -> LossFn:
    t = np.asarray(target, dtype=np.float64).ravel()
    n = t.size

    def fn(v):
        r = v - t
        return float(r @ r) / n, (2.0 / n) * r

    return fn


def embed_prior(
    net: CoordinateNetwork, prior: np.ndarray, cfg: TrainingConfig, iterations: int | None = None
) -> TrainResult:
    """Fit a copy of ``net`` to the prior image by mean squared error."""
    iterations = cfg.iterations if iterations is None else iterations
    if iterations < 1:
        raise NoOptimizationError("no optimization performed (iterations=0)")
    prior = np.asarray(prior, dtype=np.float64)
    if prior.ndim != 2 or prior.shape[0] != prior.shape[1]:
        raise ValueError(f"prior must be a square image, got {prior.shape}")
    grid = ImageGrid(prior.shape[0])
    return optimize(
        net.copy(), grid.normalized_coords(), embedding_loss(prior), iterations, cfg.lr_embed, cfg
    )


@dataclass
class DataTerm:
    """One weighted data-consistency term ``weight * ||A x - y||^2``."""

    op: ForwardOperator
    y: np.ndarray
    weight: float = 1.0


def data_loss(terms: Sequence[DataTerm]) -> LossFn:
    ys = [np.asarray(t.y, dtype=np.float64).ravel() for t in terms]

    def fn(v):
        loss = 0.0
        grad = np.zeros_like(v)
        for t, y in zip(terms, ys):
            if t.weight == 0:
                continue
            r = t.op.matrix @ v - y
            loss += t.weight * float(r @ r)
            grad += (2.0 * t.weight) * (t.op.matrix_t @ r)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite data loss {loss!r}")
        return loss, grad

    return fn


def data_loss_gradient(net: CoordinateNetwork, op: ForwardOperator, y: np.ndarray):
    """``||A M(c) - y||^2`` and its gradient w.r.t. every parameter."""
    coords = op.grid.normalized_coords()
    out, tape = net.forward(coords, keep=True)
    loss, g_img = data_loss([DataTerm(op, y)])(out.astype(np.float64))
    grads = net.backward(tape, g_img)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite gradient")
    return loss, grads


def train_center(
    net_prior: CoordinateNetwork,
    op: ForwardOperator,
    y: np.ndarray,
    cfg: TrainingConfig,
    iterations: int | None = None,
) -> tuple[TrainResult, np.ndarray]:
    """Data-consistency training on the slice's own measurement."""
    return train_terms(net_prior, [DataTerm(op, y)], cfg, iterations)


def train_neighbor(
    net_prior: CoordinateNetwork,
    op_center: ForwardOperator,
    y_center: np.ndarray,
    op_neighbor: ForwardOperator,
    y_neighbor: np.ndarray,
    delta: float,
    cfg: TrainingConfig,
    iterations: int | None = None,
) -> tuple[TrainResult, np.ndarray]:
    """Joint loss: centre measurement (weight 1) + neighbour measurement (weight delta)."""
    terms = [DataTerm(op_center, y_center, 1.0), DataTerm(op_neighbor, y_neighbor, delta)]
    return train_terms(net_prior, terms, cfg, iterations)


def train_terms(
    net_init: CoordinateNetwork,
    terms: Sequence[DataTerm],
    cfg: TrainingConfig,
    iterations: int | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> tuple[TrainResult, np.ndarray]:
    grid = terms[0].op.grid
    iterations = cfg.iterations if iterations is None else iterations
    result = optimize(
        net_init.copy(),
        grid.normalized_coords(),
        data_loss(terms),
        iterations,
        cfg.lr_reconstruct,
        cfg,
        callback,
    )
    return result, infer(result.net, grid)


def neighbor_offsets(W: int) -> list[int]:
    """Offsets k in {1-(W+1)/2, ..., W-(W+1)/2} without 0."""
    h = (W + 1) // 2
    return [j - h for j in range(1, W + 1) if j != h]


@dataclass(frozen=True)
class WindowJob:
    """One per-wavelength training job at the centre slice of a window."""

    center: int
    offset: int
    wavelength_index: int
    wavelength_nm: float


def plan_window(schedule: SpiralSchedule, m: int) -> list[WindowJob]:
    """Jobs for every wavelength of the window, ordered by wavelength index."""
    schedule.window(m)
    W = schedule.num_wavelengths
    offsets = [0] + neighbor_offsets(W)
    jobs = []
    for k in offsets:
        rec = schedule.record(m + k)
        jobs.append(WindowJob(m, k, rec.wavelength_index, rec.wavelength_nm))
    return sorted(jobs, key=lambda j: j.wavelength_index)


def check_neighbor(schedule: SpiralSchedule, m: int, k: int, wavelength_nm: float) -> None:
    if k == 0:
        raise ValueError("k = 0 is the centre term; use train_center")
    if k not in neighbor_offsets(schedule.num_wavelengths):
        raise ScheduleError(f"offset {k} outside the window of W={schedule.num_wavelengths}")
    got = schedule.record(m + k).wavelength_nm
    if got != wavelength_nm:
        raise ScheduleError(f"slice {m + k} carries {got} nm, not the target {wavelength_nm} nm")


@dataclass
class SliceReconstruction:
    center: int
    wavelengths: list[float]
    images: list[np.ndarray]
    results: list[TrainResult]


def _run_job(args):
    net_init, terms, cfg, iterations, scale = args
    result, image = train_terms(net_init, terms, cfg, iterations)
    return result, image * scale


def reconstruct_slice(
    net_init: CoordinateNetwork,
    schedule: SpiralSchedule,
    sinos: Sequence[Sinogram],
    m: int,
    cfg: TrainingConfig,
    grid: ImageGrid,
    data_scale: float = 1.0,
    iterations: int | None = None,
    jobs: int = 1,
) -> SliceReconstruction:
    """All W wavelength images at slice ``m``.

    ``sinos[k - 1]`` is the sparse sinogram of slice k. Every job starts from
    its own copy of ``net_init``. Measurements are divided by ``data_scale``
    before training and images multiplied back, so a network embedded on a
    normalised prior sees data in the prior's units.
    """
    plan = plan_window(schedule, m)
    if data_scale <= 0:
        raise ValueError("data_scale must be > 0")
    ops: dict[int, ForwardOperator] = {}

    def op_for(k: int) -> ForwardOperator:
        if k not in ops:
            s = sinos[k - 1]
            ops[k] = ForwardOperator(grid, s.geometry, s.time)
        return ops[k]

    tasks = []
    for job in plan:
        center = DataTerm(op_for(m), sinos[m - 1].samples / data_scale, 1.0)
        if job.offset == 0:
            terms = [center]
        else:
            check_neighbor(schedule, m, job.offset, job.wavelength_nm)
            k = m + job.offset
            terms = [center, DataTerm(op_for(k), sinos[k - 1].samples / data_scale, cfg.delta)]
        tasks.append((net_init, terms, cfg, iterations, data_scale))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            out = list(pool.map(_run_job, tasks))
    else:
        out = [_run_job(t) for t in tasks]
    return SliceReconstruction(
        m,
        [j.wavelength_nm for j in plan],
        [img for _, img in out],
        [res for res, _ in out],
    )
