"""Global blob-fitting optimizer.

Minimizes the squared difference between a reference transient image and
the rendering of the blob isosurface. The outer loop alternates residual-
guided sampling, three mutation strategies (add / duplicate / delete, each
followed by local relaxation), a reiteration pass, and a significance sweep
that deletes blobs whose removal costs less than a factor eta. Local
relaxation is two-stage Levenberg-Marquardt over the pivot's nearest
neighbors: positions first, then positions and widths (widths in log space,
clamped to [SIGMA_MIN, sigma_max]).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backproject import PDF_FLOOR, backproject, density_to_pdf, sample_location
from .blobfield import SIGMA_MIN, ISO_DEFAULT, BlobSet, extract_mesh
from .render import RenderOptions, render
from .scene import SceneConfig, TransientImage, VolumeSpec


@dataclass
class OptimizerConfig:
    sigma0: float = 1.5            # width of newly added blobs
    sigma_max: float = 10.0        # upper width bound in the second LM stage
    eta: float = 1.005             # deletion tolerance factor (>= 1)
    k_neighbors: int = 10          # relaxation neighborhood size
    c_thresh: float = 0.005        # stop ratio vs. the empty-hypothesis cost
    split_offset: float | None = None  # duplicate displacement; None: sigma/2
    fd_step: float = 1e-2          # finite-difference floor (positions, log-sigma)
    fd_sigma_frac: float = 1e-3    # position step also scales with blob width
    lm_max_iterations: int = 10
    lm_damping0: float = 1e-3
    lm_max_rejections: int = 12
    lm_step_max: float = 1.0       # step-norm clamp (trust-region safeguard)
    seed: int = 0
    max_outer_iterations: int = 100
    pdf_resolution: int | None = None  # sampling-PDF voxels/axis; None: volume

    def __post_init__(self):
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


@dataclass
class Objective:
    """Sum-of-squares mismatch between the reference and a rendered BlobSet."""

    reference: TransientImage
    scene: SceneConfig
    grid: VolumeSpec
    iso: float = ISO_DEFAULT
    options: RenderOptions = RenderOptions()
    backend: str | None = None
    n_evals: int = field(default=0, init=False)

    def render_blobs(self, blobs: BlobSet) -> TransientImage:
        mesh = extract_mesh(blobs, self.grid, self.iso, backend=self.backend)
        return render(self.scene, mesh, self.options, backend=self.backend)

    def residual(self, blobs: BlobSet) -> np.ndarray:
        self.n_evals += 1
        return (self.reference.values
                - self.render_blobs(blobs).values).ravel()

    def cost(self, blobs: BlobSet) -> float:
        r = self.residual(blobs)
        return float(r @ r)

    def empty_cost(self) -> float:
        v = self.reference.values.ravel()
        return float(v @ v)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    n_residual_evals: int


def levenberg_marquardt(residual_fn, x0, fd_steps, max_iterations: int = 10,
                        damping0: float = 1e-3, max_rejections: int = 12,
                        cost_tol: float = 1e-6, step_tol: float = 1e-12,
                        step_max: float = np.inf) -> LMResult:
    """Damped least squares with forward-difference Jacobian.

    Damping scales the normal-equation diagonal (classic Marquardt form);
    it doubles on rejected steps and shrinks by 3 on accepted ones. Steps
    longer than ``step_max`` are scaled back onto that radius, which keeps
    the near-Gauss-Newton steps from vaulting out of the local descent
    corridor on this strongly nonlinear objective. The best-seen point is
    returned, so the result never exceeds the entry cost.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    h = np.broadcast_to(np.asarray(fd_steps, dtype=np.float64), x.shape)
    r = residual_fn(x)
    cost = float(r @ r)
    n_evals = 1
    lam = damping0
    it = 0
    converged = False
    while it < max_iterations and not converged:
        it += 1
        jac = np.empty((r.size, x.size))
        for j in range(x.size):
            xp = x.copy()
            xp[j] += h[j]
            jac[:, j] = (residual_fn(xp) - r) / h[j]
            n_evals += 1
        jtj = jac.T @ jac
        g = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = max(diag.max(initial=0.0), 1.0) * 1e-12
        accepted = False
        for _ in range(max_rejections):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 2.0
                continue
            norm = np.linalg.norm(delta)
            if norm > step_max:
                delta *= step_max / norm
            x_new = x + delta
            r_new = residual_fn(x_new)
            n_evals += 1
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                improvement = (cost - cost_new) / cost if cost > 0 else 1.0
                x, r, cost = x_new, r_new, cost_new
                lam /= 3.0
                accepted = True
                converged = (cost == 0.0 or improvement < cost_tol
                             or np.linalg.norm(delta)
                             < step_tol * (1 + np.linalg.norm(x)))
                break
            lam *= 2.0
        if not accepted:
            break
    return LMResult(x=x, cost=cost, iterations=it, n_residual_evals=n_evals)


# ---------------------------------------------------------------------------
# neighborhood relaxation


def find_neighbors(pivot: int, blobs: BlobSet, k: int) -> np.ndarray:
    """Indices of the k blobs nearest the pivot's center (pivot included).

    Distance ties resolve to the lower index; all blobs when m <= k.
    """
    if not 0 <= pivot < len(blobs):
        raise IndexError("pivot not in blob set")
    d = np.linalg.norm(blobs.centers - blobs.centers[pivot], axis=1)
    order = np.argsort(d, kind="stable")
    return order[:min(k, len(blobs))]


def _pack(blobs: BlobSet, neigh: np.ndarray, with_sigma: bool,
          cfg: OptimizerConfig):
    """Free-parameter vector and matching fd steps for a neighborhood."""
    data = blobs.data[neigh]
    if with_sigma:
        x = np.concatenate([data[:, :3],
                            np.log(data[:, 3:4])], axis=1).ravel()
        h = np.concatenate([
            np.maximum(cfg.fd_step, cfg.fd_sigma_frac * data[:, 3:4])
            .repeat(3, axis=1),
            np.full((len(neigh), 1), cfg.fd_step)], axis=1).ravel()
    else:
        x = data[:, :3].ravel()
        h = np.maximum(cfg.fd_step,
                       cfg.fd_sigma_frac * data[:, 3:4]).repeat(3, axis=1).ravel()
    return x, h


def _unpack(blobs: BlobSet, neigh: np.ndarray, with_sigma: bool,
            x: np.ndarray, cfg: OptimizerConfig) -> BlobSet:
    rows = blobs.data.copy()
    if with_sigma:
        vals = x.reshape(-1, 4)
        rows[neigh, :3] = vals[:, :3]
        rows[neigh, 3] = np.clip(np.exp(vals[:, 3]), SIGMA_MIN, cfg.sigma_max)
    else:
        rows[neigh, :3] = x.reshape(-1, 3)
    return blobs.with_rows(rows)


def iterate(pivot: int, blobs: BlobSet, obj: Objective,
            cfg: OptimizerConfig) -> tuple[BlobSet, float]:
    """Two-stage LM relaxation of the pivot's neighborhood.

    Stage one frees the neighbor positions, stage two positions and widths.
    Never returns a point worse than the entry cost.
    """
    neigh = find_neighbors(pivot, blobs, cfg.k_neighbors)

    def run(with_sigma: bool, current: BlobSet) -> tuple[BlobSet, float]:
        x0, h = _pack(current, neigh, with_sigma, cfg)

        def residual_fn(x):
            return obj.residual(_unpack(current, neigh, with_sigma, x, cfg))

        res = levenberg_marquardt(residual_fn, x0, h,
                                  max_iterations=cfg.lm_max_iterations,
                                  damping0=cfg.lm_damping0,
                                  max_rejections=cfg.lm_max_rejections,
                                  step_max=cfg.lm_step_max)
        return _unpack(current, neigh, with_sigma, res.x, cfg), res.cost

    blobs, _ = run(False, blobs)
    return run(True, blobs)


# ---------------------------------------------------------------------------
# mutations


def mutate_add(blobs: BlobSet, x, obj: Objective,
               cfg: OptimizerConfig) -> tuple[BlobSet, float]:
    """Insert a fresh blob of width sigma0 at x and relax around it."""
    grown = blobs.appended(x, cfg.sigma0)
    return iterate(len(grown) - 1, grown, obj, cfg)


def mutate_duplicate(blobs: BlobSet, x, obj: Objective, cfg: OptimizerConfig,
                     direction) -> tuple[BlobSet, float]:
    """Split the blob nearest x into two offset copies and relax."""
    if not len(blobs):
        raise ValueError("duplicate requires a nonempty blob set")
    i = blobs.nearest(x)
    center = blobs.centers[i]
    sigma = float(blobs.sigmas[i])
    offset = cfg.split_offset if cfg.split_offset is not None else sigma / 2.0
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d) * offset
    split = blobs.removed(i).appended(center + d, sigma).appended(center - d, sigma)
    return iterate(len(split) - 2, split, obj, cfg)


def mutate_delete(blobs: BlobSet, x, obj: Objective,
                  cfg: OptimizerConfig) -> tuple[BlobSet, float]:
    """Remove the blob nearest x and relax around the closest survivor."""
    if not len(blobs):
        raise ValueError("delete requires a nonempty blob set")
    shrunk = blobs.removed(blobs.nearest(x))
    if not len(shrunk):
        return shrunk, obj.cost(shrunk)
    return iterate(shrunk.nearest(x), shrunk, obj, cfg)


def check_delete(blobs: BlobSet, cost: float, obj: Objective,
                 cfg: OptimizerConfig) -> tuple[BlobSet, float]:
    """Drop blobs whose removal keeps the cost below eta times the current
    baseline; the baseline updates after every deletion. May increase cost.

    Issues exactly one candidate evaluation per starting blob plus one final
    recompute.
    """
    baseline = cost
    i = 0
    while i < len(blobs):
        candidate = blobs.removed(i)
        c = obj.cost(candidate)
        if c < cfg.eta * baseline:
            blobs = candidate
            baseline = c
        else:
            i += 1
    return blobs, obj.cost(blobs)


# ---------------------------------------------------------------------------
# global scheme


@dataclass
class IterationLog:
    iteration: int
    phase: str          # init | mutation | reiterate | check_delete
    detail: str         # chosen mutation, or ""
    cost_before: float
    cost_after: float
    n_blobs: int
    elapsed: float      # seconds since run start


@dataclass
class RunRecord:
    rows: list[IterationLog]
    final: BlobSet
    final_cost: float
    initial_cost: float   # empty-hypothesis cost
    seed: int

    def deterministic_view(self) -> tuple:
        """Everything except wall-clock timing, for bitwise comparisons."""
        return (tuple((r.iteration, r.phase, r.detail, r.cost_before,
                       r.cost_after, r.n_blobs) for r in self.rows),
                self.final.data.tobytes(), self.final_cost,
                self.initial_cost, self.seed)


MUTATION_NAMES = ("add", "duplicate", "delete")


def _sample_point(blobs: BlobSet, obj: Objective, cfg: OptimizerConfig,
                  rng: np.random.Generator) -> np.ndarray:
    residual = obj.reference.values - obj.render_blobs(blobs).values
    image = TransientImage(np.abs(residual), obj.reference.axis,
                           obj.reference.detector_shape)
    res = cfg.pdf_resolution
    density = backproject(image, obj.scene, resolution=res,
                          backend=obj.backend)
    pdf = density_to_pdf(density, use_abs=True, floor=PDF_FLOOR)
    return sample_location(pdf, density, rng)


def reconstruct(obj: Objective, cfg: OptimizerConfig, on_iteration=None,
                initial: BlobSet | None = None,
                initial_iteration: int = 0) -> RunRecord:
    """Run the full global optimization until the cost ratio drops below
    c_thresh or the outer-iteration budget is spent.

    ``on_iteration(iteration, blobs, cost)`` is invoked after every outer
    iteration (checkpointing hook). Fully reproducible from cfg.seed.
    ``initial`` warm-starts from a checkpoint instead of the single seeded
    blob (the random stream restarts, so a resumed run is deterministic on
    its own but not a bit-continuation of the interrupted one).
    """
    rng = np.random.default_rng(cfg.seed)
    t_start = time.perf_counter()
    rows: list[IterationLog] = []
    c0 = obj.empty_cost()
    threshold = cfg.c_thresh * c0

    if initial is not None:
        blobs = initial
        cost = obj.cost(blobs)
        rows.append(IterationLog(initial_iteration, "init", "resume", c0,
                                 cost, len(blobs),
                                 time.perf_counter() - t_start))
    else:
        x = _sample_point(BlobSet(), obj, cfg, rng)
        blobs, cost = mutate_add(BlobSet(), x, obj, cfg)
        rows.append(IterationLog(0, "init", "add", c0, cost, len(blobs),
                                 time.perf_counter() - t_start))
    if on_iteration:
        on_iteration(initial_iteration, blobs, cost)

    iteration = initial_iteration
    while cost > threshold and iteration < cfg.max_outer_iterations:
        iteration += 1
        x = _sample_point(blobs, obj, cfg, rng)

        candidates: list[tuple[str, BlobSet, float]] = []
        candidates.append(("add", *mutate_add(blobs, x, obj, cfg)))
        if len(blobs):
            direction = rng.normal(size=3)
            if not np.linalg.norm(direction):
                direction = np.array([1.0, 0.0, 0.0])
            candidates.append(
                ("duplicate", *mutate_duplicate(blobs, x, obj, cfg, direction)))
            candidates.append(("delete", *mutate_delete(blobs, x, obj, cfg)))

        best = min(range(len(candidates)), key=lambda i: candidates[i][2])
        chosen = "none"
        before = cost
        if candidates[best][2] < cost:
            chosen, blobs, cost = candidates[best]
        rows.append(IterationLog(iteration, "mutation", chosen, before, cost,
                                 len(blobs), time.perf_counter() - t_start))

        if len(blobs):
            pivot = int(rng.integers(len(blobs)))
            relaxed, c_r = iterate(pivot, blobs, obj, cfg)
            before = cost
            if c_r < cost:
                blobs, cost = relaxed, c_r
            rows.append(IterationLog(iteration, "reiterate", str(pivot),
                                     before, cost, len(blobs),
                                     time.perf_counter() - t_start))

        before = cost
        blobs, cost = check_delete(blobs, cost, obj, cfg)
        rows.append(IterationLog(iteration, "check_delete", "", before, cost,
                                 len(blobs), time.perf_counter() - t_start))
        if on_iteration:
            on_iteration(iteration, blobs, cost)

    return RunRecord(rows=rows, final=blobs, final_cost=cost,
                     initial_cost=c0, seed=cfg.seed)
