"""One-step supervised training: targets, noise injection, normalization, Adam.

Velocities and accelerations use the dt = 1 convention (raw position
differences); the physical timestep lives in dataset metadata only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import net
from .graph import HISTORY, GraphConfig, SceneState, SimGraph, build_graph, merge_graphs

STD_FLOOR = 1e-8

NODE_FAMILIES = ("liquid", "object", "mesh")
ALL_FAMILIES = NODE_FAMILIES + net.EDGE_FAMILIES + ("accel",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    noise_sigma: float = 6.7e-4
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    max_steps: int = 2_000_000  # paper scale; desk-scale configs override (e.g. 50k)
    batch_size: int = 20  # paper scale; desk-scale configs override (e.g. 4)
    seed: int = 0
    norm_sample_windows: int = 500
    log_every: int = 100

    def __post_init__(self):
        if not (self.lr_start > self.lr_end > 0):
            raise ValueError("require lr_start > lr_end > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Normalization statistics
# ---------------------------------------------------------------------------


class NormStats:
    """Per-dimension mean/std for every feature family plus the targets.

    Accumulated once over a sample of the training data with Welford updates,
    then frozen; stds are floored at 1e-8.
    """

    def __init__(self, dims: dict[str, int]):
        self.dims = dict(dims)
        self.count = {f: 0 for f in self.dims}
        self.mean = {f: np.zeros(d) for f, d in self.dims.items()}
        self.m2 = {f: np.zeros(d) for f, d in self.dims.items()}
        self.std = {f: np.ones(d) for f, d in self.dims.items()}
        self.frozen = False
        self._tensor_cache: dict = {}

    @staticmethod
    def for_model(graph_cfg: GraphConfig) -> "NormStats":
        dims = net.FeatureDims.from_graph_config(graph_cfg)
        return NormStats(
            {
                "liquid": dims.liquid,
                "object": dims.object,
                "mesh": dims.mesh,
                "e_l": dims.e_l,
                "e_ol": dims.e_ol,
                "e_om": dims.e_om,
                "e_mo": dims.e_mo,
                "accel": 3,
            }
        )

    def accumulate(self, family: str, rows: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("normalization statistics are frozen")
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dims[family])
        if len(rows) == 0:
            return
        # Chan/Welford parallel merge of the chunk into the running stats
        n_b = len(rows)
        mean_b = rows.mean(axis=0)
        m2_b = ((rows - mean_b) ** 2).sum(axis=0)
        n_a = self.count[family]
        total = n_a + n_b
        delta = mean_b - self.mean[family]
        self.mean[family] += delta * (n_b / total)
        self.m2[family] += m2_b + delta * delta * (n_a * n_b / total)
        self.count[family] = total

    def accumulate_graph(self, graph: SimGraph) -> None:
        self.accumulate("liquid", graph.liquid_feats)
        self.accumulate("object", graph.object_feats)
        if graph.num_mesh:
            self.accumulate("mesh", graph.mesh_feats)
        for fam in net.EDGE_FAMILIES:
            e = getattr(graph, fam)
            if len(e):
                self.accumulate(fam, e.feats)

    def freeze(self) -> None:
        for f in self.dims:
            if self.count[f] > 1:
                self.std[f] = np.sqrt(self.m2[f] / self.count[f])
            self.std[f] = np.maximum(self.std[f], STD_FLOOR)
            # round to f32-representable values so a resumed run normalizes
            # exactly like the run that wrote the checkpoint
            self.mean[f] = self.mean[f].astype(np.float32).astype(np.float64)
            self.std[f] = self.std[f].astype(np.float32).astype(np.float64)
        self.frozen = True
        self._tensor_cache.clear()

    def normalize(self, family: str, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[family]) / self.std[family]

    def denormalize(self, family: str, x: np.ndarray) -> np.ndarray:
        return x * self.std[family] + self.mean[family]

    def _consts(self, family: str, dtype: torch.dtype):
        key = (family, dtype)
        if key not in self._tensor_cache:
            self._tensor_cache[key] = (
                torch.as_tensor(self.mean[family], dtype=dtype),
                torch.as_tensor(self.std[family], dtype=dtype),
            )
        return self._tensor_cache[key]

    def normalize_tensor(self, family: str, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._consts(family, x.dtype)
        return (x - mean) / std

    def denormalize_tensor(self, family: str, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._consts(family, x.dtype)
        return x * std + mean

    def state_tensors(self) -> dict:
        out = {"frozen": np.array([1.0 if self.frozen else 0.0])}
        for f in self.dims:
            out[f"{f}.mean"] = self.mean[f]
            out[f"{f}.std"] = self.std[f]
            out[f"{f}.count"] = np.array([float(self.count[f])])
        return out

    @staticmethod
    def from_tensors(tensors: dict) -> "NormStats":
        fams = sorted({k.split(".")[0] for k in tensors if k.endswith(".mean")})
        ns = NormStats({f: len(tensors[f"{f}.mean"]) for f in fams})
        for f in fams:
            ns.mean[f] = np.asarray(tensors[f"{f}.mean"], dtype=np.float64)
            ns.std[f] = np.asarray(tensors[f"{f}.std"], dtype=np.float64)
            ns.count[f] = int(tensors[f"{f}.count"][0])
        ns.frozen = bool(tensors.get("frozen", np.array([1.0]))[0])
        return ns


# ---------------------------------------------------------------------------
# Targets and noise
# ---------------------------------------------------------------------------


def target_acceleration(window: np.ndarray) -> np.ndarray:
    """Second finite difference over the last three frames: (..., F, 3) -> (..., 3).

    The window holds the model-input frames plus the ground-truth next frame.
    """
    window = np.asarray(window, dtype=np.float64)
    return window[..., -1, :] - 2.0 * window[..., -2, :] + window[..., -3, :]


def inject_noise(state: SceneState, sigma: float, rng: np.random.Generator):
    """Random-walk position noise on the particle history.

    Per-step increments are N(0, sigma/sqrt(HISTORY)) so the newest frame ends
    up perturbed with std sigma; the oldest frame stays clean. Returns the
    perturbed state and the target correction that re-aims the supervised
    acceleration at the clean next position. Object poses are not perturbed.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    hist = state.particle_history
    n, frames, _ = hist.shape
    steps = frames - 1
    if sigma == 0.0:
        return state, np.zeros((n, 3))
    incr = rng.normal(0.0, sigma / math.sqrt(steps), size=(n, steps, 3))
    walk = np.concatenate([np.zeros((n, 1, 3)), np.cumsum(incr, axis=1)], axis=1)
    noisy = SceneState(
        hist + walk,
        state.object_translations,
        state.object_quats,
        state.object_kind,
        state.meshes,
        state.bvhs,
    )
    correction = -2.0 * walk[:, -1] + walk[:, -2]
    return noisy, correction


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Exponential decay from lr_start to lr_end over max_steps."""
    frac = min(max(step, 0), cfg.max_steps) / cfg.max_steps
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments stored in one flat buffer per kind; the model parameters
    are rebound as views into a matching flat buffer so the whole update is a
    handful of vector ops. `m`/`v` expose per-parameter views by name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flat_param: torch.Tensor | None = None
    flat_m: torch.Tensor | None = None
    flat_v: torch.Tensor | None = None
    flat_g: torch.Tensor | None = None
    names: list = field(default_factory=list)
    grad_views: dict = field(default_factory=dict)

    @staticmethod
    def for_params(params: net.ModelParams) -> "AdamState":
        names, tensors = params.parameter_list()
        flat = torch.cat([t.detach().reshape(-1) for t in tensors])
        state = AdamState(
            flat_param=flat,
            flat_m=torch.zeros_like(flat),
            flat_v=torch.zeros_like(flat),
            flat_g=torch.zeros_like(flat),
            names=list(names),
        )
        offset = 0
        for name, t in zip(names, tensors):
            n = t.numel()
            t.data = flat[offset : offset + n].view_as(t)
            state.m[name] = state.flat_m[offset : offset + n].view_as(t)
            state.v[name] = state.flat_v[offset : offset + n].view_as(t)
            state.grad_views[name] = state.flat_g[offset : offset + n].view_as(t)
            offset += n
        return state

    def state_tensors(self) -> dict:
        out = {f"{k}.m": v.detach().cpu().numpy() for k, v in self.m.items()}
        out.update({f"{k}.v": v.detach().cpu().numpy() for k, v in self.v.items()})
        return out

    def load_tensors(self, tensors: dict) -> None:
        with torch.no_grad():
            for k in self.m:
                self.m[k].copy_(torch.as_tensor(tensors[f"{k}.m"].copy()))
                self.v[k].copy_(torch.as_tensor(tensors[f"{k}.v"].copy()))


def adam_step(params: net.ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    if state.flat_param is None:
        raise RuntimeError("AdamState must be created with AdamState.for_params")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for n in state.names:
            state.grad_views[n].copy_(grads[n])
        g = state.flat_g
        state.flat_m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        state.flat_v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (state.flat_v / bc2).sqrt_().add_(state.eps)
        state.flat_param.addcdiv_(state.flat_m, denom, value=-lr / bc1)


# ---------------------------------------------------------------------------
# Training step and loop
# ---------------------------------------------------------------------------


def train_step(
    batch: list[tuple[SimGraph, np.ndarray]],
    params: net.ModelParams,
    adam: AdamState,
    norm: NormStats,
    cfg: TrainConfig,
) -> float:
    """One optimizer update on a batch of (graph, raw target acceleration)."""
    if not norm.frozen:
        raise RuntimeError("normalization statistics must be frozen before training")
    merged = merge_graphs([g for g, _ in batch])
    targets = np.concatenate([t for _, t in batch])
    target_n = torch.as_tensor(norm.normalize("accel", targets), dtype=params.dtype)

    result = net.forward(merged, params, norm)
    residual = result.accel - target_n
    loss = float(residual.detach().pow(2).sum(dim=1).mean())
    if not math.isfinite(loss):
        raise TrainingDiverged("diverged")
    seed = residual.detach() * (2.0 / residual.shape[0])
    grads = net.backward(result.tape, seed)
    adam_step(params, grads, adam, lr_at(adam.step, cfg))
    return loss


@dataclass
class WindowSample:
    state: SceneState
    next_positions: np.ndarray  # clean ground-truth frame after the window


def episode_window(episode, t: int) -> WindowSample:
    """Scene window ending at frame t (inclusive); prediction target is t + 1."""
    if t < HISTORY or t + 1 >= episode.positions.shape[0]:
        raise ValueError("short-history")
    lo = t - HISTORY
    return WindowSample(
        state=SceneState(
            episode.positions[lo : t + 1].transpose(1, 0, 2).copy(),
            episode.translations[lo : t + 1].transpose(1, 0, 2).copy(),
            episode.quats[lo : t + 1].transpose(1, 0, 2).copy(),
            episode.kinds,
            episode.meshes,
            episode.bvhs,
        ),
        next_positions=episode.positions[t + 1].copy(),
    )


def _sample_indices(episodes, rng: np.random.Generator, count: int):
    lengths = np.array([ep.positions.shape[0] for ep in episodes])
    usable = lengths - HISTORY - 1
    probs = usable / usable.sum()
    eps = rng.choice(len(episodes), size=count, p=probs)
    ts = HISTORY + rng.integers(0, usable[eps])
    return list(zip(eps.tolist(), ts.tolist()))


def build_norm_stats(episodes, graph_cfg: GraphConfig, cfg: TrainConfig) -> NormStats:
    """First-pass statistics over a seeded sample of training windows."""
    norm = NormStats.for_model(graph_cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    total_windows = sum(ep.positions.shape[0] - HISTORY - 1 for ep in episodes)
    count = min(cfg.norm_sample_windows, total_windows)
    for ep_i, t in _sample_indices(episodes, rng, count):
        sample = episode_window(episodes[ep_i], t)
        noisy, correction = inject_noise(sample.state, cfg.noise_sigma, rng)
        norm.accumulate_graph(build_graph(noisy, graph_cfg))
        target = (
            target_acceleration(
                np.concatenate(
                    [noisy.particle_history, sample.next_positions[:, None]], axis=1
                )
            )
        )
        norm.accumulate("accel", target)
    norm.freeze()
    return norm


def train_loop(
    episodes,
    params: net.ModelParams,
    norm: NormStats,
    graph_cfg: GraphConfig,
    cfg: TrainConfig,
    steps: int,
    adam: AdamState | None = None,
    on_step=None,
) -> tuple[AdamState, list[tuple[int, float, float]]]:
    """Run `steps` optimizer updates; returns (adam state, metric rows).

    Fully deterministic given (episodes, params, cfg.seed, adam.step): the
    sampling RNG is re-derived from the global step counter.
    """
    if adam is None:
        adam = AdamState.for_params(params)
    metrics = []
    for _ in range(steps):
        rng = np.random.default_rng((cfg.seed, adam.step))
        batch = []
        for ep_i, t in _sample_indices(episodes, rng, cfg.batch_size):
            sample = episode_window(episodes[ep_i], t)
            noisy, _ = inject_noise(sample.state, cfg.noise_sigma, rng)
            graph = build_graph(noisy, graph_cfg)
            target = target_acceleration(
                np.concatenate([noisy.particle_history, sample.next_positions[:, None]], axis=1)
            )
            batch.append((graph, target))
        step_before = adam.step
        loss = train_step(batch, params, adam, norm, cfg)
        metrics.append((step_before, loss, lr_at(step_before, cfg)))
        if on_step is not None:
            on_step(step_before, loss)
    return adam, metrics
