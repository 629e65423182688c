"""Optimization loop: Adam over the ELBO with minibatching and random restarts.

Each restart candidate trains for a short warmup (5% of the iteration
budget); the best candidate by ELBO then continues for the remaining budget.
The trace records the winning lineage (its warmup plus the main phase) with
per-iteration wall-clock times.
"""

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import snapshot, svgp
from .autodiff import Param
from .errors import (AllRestartsFailed, NonFinite, NotPositiveDefinite)
from .ioutil import atomic_write_text
from .kernels import GSMKernel, RBFKernel, SMKernel
from .latent import GPInterpFunction, NeuralFunction

KERNEL_CHOICES = ("rbf", "sm", "gp-gsm", "neural-gsm")


@dataclass
class TrainConfig:
    q: int = 2
    m_inducing: int = 100
    learning_rate: float = 0.01
    batch_size: int = 128
    max_iters: int = 17500
    restarts: int = 8
    seed: int = 0
    l2_coeff: float = 1e-4

    def validate(self, n_train=None):
        if self.q < 1 or self.m_inducing < 1 or self.max_iters < 1 or self.restarts < 1:
            raise ValueError("q, m_inducing, max_iters, and restarts must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.l2_coeff < 0:
            raise ValueError("learning_rate and batch_size must be positive")
        if n_train is not None and self.batch_size > n_train:
            raise ValueError(
                f"batch_size {self.batch_size} exceeds training set size {n_train}")


@dataclass
class TrainTrace:
    iterations: list
    elbos: list
    wall_ms: list
    restart_scores: list
    selected_restart: int
    final_params: dict

    @property
    def mean_wall_ms(self):
        return float(np.mean(self.wall_ms)) if self.wall_ms else 0.0

    def to_csv(self, path):
        lines = ["iteration,elbo,wall_ms"]
        for it, e, w in zip(self.iterations, self.elbos, self.wall_ms):
            lines.append(f"{it},{e!r},{w!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")


class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    def __init__(self, params):
        self.m = {id(p): np.zeros_like(p.raw) for p in params}
        self.v = {id(p): np.zeros_like(p.raw) for p in params}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update (bias-corrected); aborts on non-finite gradients."""
    for p in params:
        g = grads.get(p)
        if g is not None and not np.isfinite(g).all():
            raise NonFinite(f"non-finite gradient for parameter {p.name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        m = state.m[id(p)]
        v = state.v[id(p)]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.raw -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class _Batcher:
    """Uniform minibatches without replacement, reshuffled each epoch."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._cursor = 0

    def next_indices(self):
        if self._cursor >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._cursor = 0
        idx = self._perm[self._cursor : self._cursor + self.batch]
        self._cursor += self.batch
        return idx


def _objective_step(model, params, x, y, idx, n_total, state, cfg):
    tape = ad.Tape()
    elbo = model.elbo(x[idx], y[idx], n_total, read=tape.watch)
    loss = -elbo
    l2 = model.kernel.l2_params()
    if l2 and cfg.l2_coeff > 0:
        penalty = None
        for p in l2:
            node = tape.watch(p)
            term = ad.sum_all(node * node)
            penalty = term if penalty is None else penalty + term
        loss = loss + cfg.l2_coeff * penalty
    value = float(ad.value(elbo))
    if not np.isfinite(value):
        raise NonFinite("minibatch ELBO is non-finite")
    grads = ad.backward(tape, loss)
    adam_step(params, grads, state, cfg.learning_rate)
    return value


def _run_phase(model, x, y, n_total, batcher, cfg, start_iter, n_iters, records):
    params = model.params()
    state = AdamState(params)
    for k in range(n_iters):
        idx = batcher.next_indices()
        t0 = time.perf_counter()
        value = _objective_step(model, params, x, y, idx, n_total, state, cfg)
        ms = (time.perf_counter() - t0) * 1e3
        records.append((start_iter + k, value, ms))


def _score(model, x, y, eval_idx):
    return model.elbo_value(x[eval_idx], y[eval_idx], len(y))


def select_best(scores):
    """Index of the highest warmup score (first on ties)."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def train(model, data, cfg):
    """Random-restart warmups, then optimize the best candidate.

    Deterministic given (seed, config, data); timing fields excluded.
    """
    x, y = data.train_x(), data.train_y()
    n = y.shape[0]
    cfg.validate(n)
    warm = max(1, round(0.05 * cfg.max_iters))
    warm = min(warm, cfg.max_iters)
    seed_seq = np.random.SeedSequence(cfg.seed)
    cand_seeds = seed_seq.spawn(cfg.restarts + 2)
    eval_rng = np.random.default_rng(cand_seeds[-1])
    eval_idx = eval_rng.permutation(n)[: min(n, 2048)]

    scores, best = [], None
    for r in range(cfg.restarts):
        rng = np.random.default_rng(cand_seeds[r])
        model.reinitialize(rng, data)
        records = []
        try:
            _run_phase(model, x, y, n, _Batcher(n, cfg.batch_size, rng), cfg,
                       1, warm, records)
            score = _score(model, x, y, eval_idx)
        except (NonFinite, NotPositiveDefinite, np.linalg.LinAlgError) as err:
            warnings.warn(f"restart {r} failed: {err}")
            score = -np.inf
        scores.append(score)
        if np.isfinite(score) and (best is None or score > best[0]):
            best = (score, {p.name: p.raw.copy() for p in model.params()}, records)

    if best is None:
        raise AllRestartsFailed("every restart produced a non-finite ELBO")
    selected = select_best(scores)

    _, raws, records = best
    for p in model.params():
        p.raw[...] = raws[p.name]
    rng_main = np.random.default_rng(cand_seeds[cfg.restarts])
    _run_phase(model, x, y, n, _Batcher(n, cfg.batch_size, rng_main), cfg,
               warm + 1, cfg.max_iters - warm, records)

    return TrainTrace(
        iterations=[r[0] for r in records],
        elbos=[r[1] for r in records],
        wall_ms=[r[2] for r in records],
        restart_scores=scores,
        selected_restart=selected,
        final_params=snapshot.model_to_dict(model),
    )


def build_model(kernel_name, data, cfg):
    """Construct an untrained model of the requested kernel family."""
    if kernel_name not in KERNEL_CHOICES:
        raise ValueError(
            f"unknown kernel {kernel_name!r}; valid kernels: {', '.join(KERNEL_CHOICES)}")
    d = data.input_dim
    nyquist = data.nyquist
    placeholder = np.zeros((cfg.m_inducing, d))
    if kernel_name == "rbf":
        return svgp.SVGPModel(RBFKernel(d), placeholder)
    if kernel_name == "sm":
        return svgp.SVGPModel(SMKernel(cfg.q, nyquist), placeholder)
    if kernel_name == "neural-gsm":
        fn = NeuralFunction(cfg.q, nyquist, d)
        return svgp.SVGPModel(GSMKernel(fn), placeholder)
    z_param = Param(placeholder, "none", "inducing")
    fn = GPInterpFunction(cfg.q, nyquist, z_param)
    return svgp.SVGPModel(GSMKernel(fn), z_param)


@dataclass
class GridCell:
    q: int
    learning_rate: float
    batch_size: int
    log_density: float = None
    mae: float = None
    mse: float = None
    error: str = None


@dataclass
class GridSearchResult:
    best: GridCell
    best_config: TrainConfig
    best_model: object
    cells: list = field(default_factory=list)


def grid_search(data, kernel_name, cfg, qs=(1, 2, 3), lrs=(0.01, 0.001),
                batch_sizes=(64, 128)):
    """Train each (Q, lr, batch) cell; select by validation log density.

    Ties break toward smaller Q, then lower learning rate. Failed cells are
    skipped with a warning.
    """
    if data.split is None or data.split.validation.size == 0:
        raise ValueError("grid search needs a non-empty validation split")
    combos = [(q, lr, b) for q in qs for lr in lrs for b in batch_sizes]
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(combos))
    n_train = data.train_y().shape[0]

    cells, models, configs = [], [], []
    for (q, lr, b), seed in zip(combos, seeds):
        batch = min(b, n_train)
        if batch != b:
            warnings.warn(f"batch size {b} clamped to {batch} (train size)")
        cell_cfg = replace(cfg, q=q, learning_rate=lr, batch_size=batch,
                           seed=int(seed.generate_state(1)[0] % (2 ** 31)))
        cell = GridCell(q=q, learning_rate=lr, batch_size=b)
        try:
            model = build_model(kernel_name, data, cell_cfg)
            train(model, data, cell_cfg)
            pred = model.predict(data.validation_x(), include_noise=True)
            m = svgp.metrics(pred, data.validation_y())
            cell.log_density, cell.mae, cell.mse = m.log_density, m.mae, m.mse
            models.append(model)
            configs.append(cell_cfg)
        except Exception as err:  # noqa: BLE001 - cell isolation is the point
            warnings.warn(f"grid cell q={q} lr={lr} batch={b} failed: {err}")
            cell.error = str(err)
            models.append(None)
            configs.append(cell_cfg)
        cells.append(cell)

    ranked = sorted(
        (i for i, c in enumerate(cells) if c.error is None),
        key=lambda i: (-cells[i].log_density, cells[i].q, cells[i].learning_rate),
    )
    if not ranked:
        raise AllRestartsFailed("every grid cell failed")
    best = ranked[0]
    return GridSearchResult(best=cells[best], best_config=configs[best],
                            best_model=models[best], cells=cells)
