"""Encode-process-decode message-passing network over the interaction graph.

Convention for edge-update inputs: the liquid-liquid update takes
``[edge, receiver, sender]``; the typed updates (object-liquid, mesh-object,
object-mesh) take ``[edge, source, destination]``, matching the order the
node types appear in each family name. Aggregation is an unweighted sum over
incoming edges, accumulated in a canonical order (edges sorted by their raw
feature vectors) so outputs are bit-stable under particle reindexing.

Gradients come from torch's reverse mode; a ``Tape`` wraps one recorded
forward and is consumed by a single ``backward`` call.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .graph import GraphConfig, SimGraph

CHECKPOINT_MAGIC = b"FGN1"
CHECKPOINT_VERSION = 1

EDGE_FAMILIES = ("e_l", "e_ol", "e_om", "e_mo")


class NetError(RuntimeError):
    pass


@dataclass
class NetConfig:
    num_blocks: int = 10
    latent: int = 128
    hidden: int = 128
    ablated: bool = False  # no mesh nodes; object latents frozen in the processor
    residuals: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FeatureDims:
    liquid: int
    object: int
    mesh: int
    e_l: int = 4
    e_ol: int = 8
    e_om: int = 4
    e_mo: int = 4

    @staticmethod
    def from_graph_config(cfg: GraphConfig) -> "FeatureDims":
        return FeatureDims(cfg.liquid_feat_dim, cfg.object_feat_dim, cfg.mesh_feat_dim)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Mlp(torch.nn.Module):
    """Two 128-wide hidden layers with LayerNorm before ReLU, linear output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, generator: torch.Generator):
        super().__init__()
        self.in_dim = in_dim
        dims = [in_dim, hidden, hidden, out_dim]
        self.linears = torch.nn.ModuleList(
            [torch.nn.Linear(dims[i], dims[i + 1]) for i in range(3)]
        )
        self.norms = torch.nn.ModuleList([torch.nn.LayerNorm(hidden) for _ in range(2)])
        for lin in self.linears:
            bound = 1.0 / float(np.sqrt(lin.in_features))
            with torch.no_grad():
                lin.weight.copy_(
                    (torch.rand(lin.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1)
                    * bound
                )
                lin.bias.copy_(
                    (torch.rand(lin.bias.shape, generator=generator, dtype=torch.float64) * 2 - 1)
                    * bound
                )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise NetError(f"shape-error: expected width {self.in_dim}, got {x.shape[-1]}")
        x = torch.relu(self.norms[0](self.linears[0](x)))
        x = torch.relu(self.norms[1](self.linears[1](x)))
        return self.linears[2](x)


def mlp_forward(mlp: Mlp, x: torch.Tensor) -> torch.Tensor:
    return mlp(x)


def edge_mlp_forward(
    mlp: Mlp,
    edge: torch.Tensor,
    v_a: torch.Tensor,
    idx_a: torch.Tensor,
    v_b: torch.Tensor,
    idx_b: torch.Tensor,
) -> torch.Tensor:
    """MLP over [edge, v_a[idx_a], v_b[idx_b]] with the first layer's weight
    split by input block, so node projections are computed once per node
    instead of once per edge. Algebraically identical to the concatenation."""
    lin0 = mlp.linears[0]
    width = edge.shape[-1]
    latent = v_a.shape[-1]
    w_e = lin0.weight[:, :width]
    w_a = lin0.weight[:, width : width + latent]
    w_b = lin0.weight[:, width + latent :]
    h = edge @ w_e.T + (v_a @ w_a.T)[idx_a] + (v_b @ w_b.T)[idx_b] + lin0.bias
    h = torch.relu(mlp.norms[0](h))
    h = torch.relu(mlp.norms[1](mlp.linears[1](h)))
    return mlp.linears[2](h)


class ProcessorBlock(torch.nn.Module):
    def __init__(self, latent: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.f_ll = Mlp(3 * latent, hidden, latent, generator)
        self.f_ol = Mlp(3 * latent, hidden, latent, generator)
        self.f_mo = Mlp(3 * latent, hidden, latent, generator)
        self.f_om = Mlp(3 * latent, hidden, latent, generator)
        self.f_m = Mlp(2 * latent, hidden, latent, generator)
        self.f_o = Mlp(2 * latent, hidden, latent, generator)
        self.f_l = Mlp(3 * latent, hidden, latent, generator)


class ModelParams(torch.nn.Module):
    """All learned parameters: per-type encoders, P processor blocks, decoder."""

    def __init__(self, cfg: NetConfig, dims: FeatureDims, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.dims = dims
        gen = torch.Generator().manual_seed(seed)
        self.enc_liquid = Mlp(dims.liquid, cfg.hidden, cfg.latent, gen)
        self.enc_object = Mlp(dims.object, cfg.hidden, cfg.latent, gen)
        self.enc_mesh = Mlp(dims.mesh, cfg.hidden, cfg.latent, gen)
        self.enc_e_l = Mlp(dims.e_l, cfg.hidden, cfg.latent, gen)
        self.enc_e_ol = Mlp(dims.e_ol, cfg.hidden, cfg.latent, gen)
        self.enc_e_om = Mlp(dims.e_om, cfg.hidden, cfg.latent, gen)
        self.enc_e_mo = Mlp(dims.e_mo, cfg.hidden, cfg.latent, gen)
        self.blocks = torch.nn.ModuleList(
            [ProcessorBlock(cfg.latent, cfg.hidden, gen) for _ in range(cfg.num_blocks)]
        )
        self.decoder = Mlp(cfg.latent, cfg.hidden, 3, gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.linears[0].weight.dtype

    def parameter_list(self):
        """Cached (names, tensors); invalidated by dtype moves via .to()."""
        cache = getattr(self, "_param_cache", None)
        if cache is None or cache[1][0].dtype != self.dtype:
            names, tensors = zip(*self.named_parameters())
            cache = (list(names), list(tensors))
            self._param_cache = cache
        return cache


# ---------------------------------------------------------------------------
# Graph tensors
# ---------------------------------------------------------------------------


def _canonical_edge_order(feats: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Order edges by raw feature vectors (ties by indices).

    Feature vectors are functions of geometry only, so this order - and with it
    every aggregation's floating-point accumulation sequence - is invariant
    under node reindexing.
    """
    keys = (dst, src) + tuple(feats[:, k] for k in range(feats.shape[1] - 1, -1, -1))
    return np.lexsort(keys)


@dataclass
class GraphTensors:
    """Normalized feature tensors and index tensors for one (merged) graph."""

    x_l: torch.Tensor
    x_o: torch.Tensor
    x_m: torch.Tensor
    edges: dict  # family -> (src, dst, feats)
    num_liquid: int
    num_objects: int
    num_mesh: int
    leaves: dict = field(default_factory=dict)  # raw-feature leaf tensors when grads requested


def prepare_graph(
    graph: SimGraph,
    norm=None,
    dtype: torch.dtype = torch.float32,
    want_input_grads: bool = False,
) -> GraphTensors:
    """Convert a SimGraph to torch tensors, normalizing each feature family."""

    leaves: dict = {}

    def fam_tensor(name, arr, order=None):
        """Leaf tensors stay in the graph's own row order; the canonical
        reordering for aggregation happens through a differentiable gather."""
        if want_input_grads:
            t = torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)
            t.requires_grad_(True)
            leaves[name] = t
            used = t if order is None else t[order]
        else:
            used = torch.as_tensor(
                np.ascontiguousarray(arr if order is None else arr[order]), dtype=dtype
            )
        if norm is not None:
            used = norm.normalize_tensor(name, used)
        return used

    edges = {}
    for fam in EDGE_FAMILIES:
        e = getattr(graph, fam)
        order = _canonical_edge_order(e.feats, e.src, e.dst)
        edges[fam] = (
            torch.as_tensor(e.src[order]),
            torch.as_tensor(e.dst[order]),
            fam_tensor(fam, e.feats, order),
        )
    return GraphTensors(
        x_l=fam_tensor("liquid", graph.liquid_feats),
        x_o=fam_tensor("object", graph.object_feats),
        x_m=fam_tensor("mesh", graph.mesh_feats),
        edges=edges,
        num_liquid=graph.num_liquid,
        num_objects=graph.num_objects,
        num_mesh=graph.num_mesh,
        leaves=leaves,
    )


@dataclass
class LatentGraph:
    v_l: torch.Tensor
    v_o: torch.Tensor
    v_m: torch.Tensor
    e_l: torch.Tensor
    e_ol: torch.Tensor
    e_om: torch.Tensor
    e_mo: torch.Tensor
    gt: GraphTensors


def _scatter_sum(values: torch.Tensor, index: torch.Tensor, out_rows: int) -> torch.Tensor:
    out = torch.zeros(out_rows, values.shape[-1], dtype=values.dtype)
    if len(index):
        out = out.index_add(0, index, values)
    return out


def encode(gt: GraphTensors, params: ModelParams) -> LatentGraph:
    zero_m = torch.zeros(0, params.cfg.latent, dtype=params.dtype)
    return LatentGraph(
        v_l=params.enc_liquid(gt.x_l),
        v_o=params.enc_object(gt.x_o),
        v_m=params.enc_mesh(gt.x_m) if gt.num_mesh else zero_m,
        e_l=params.enc_e_l(gt.edges["e_l"][2]),
        e_ol=params.enc_e_ol(gt.edges["e_ol"][2]),
        e_om=params.enc_e_om(gt.edges["e_om"][2]) if gt.num_mesh else zero_m,
        e_mo=params.enc_e_mo(gt.edges["e_mo"][2]) if gt.num_mesh else zero_m,
        gt=gt,
    )


def process_block(lat: LatentGraph, block: ProcessorBlock, cfg: NetConfig) -> LatentGraph:
    """One message-passing step: per-edge updates, then per-node aggregation."""
    gt = lat.gt
    src_l, dst_l, _ = gt.edges["e_l"]
    src_ol, dst_ol, _ = gt.edges["e_ol"]

    if len(src_l):
        e_l = edge_mlp_forward(block.f_ll, lat.e_l, lat.v_l, dst_l, lat.v_l, src_l)
        e_l = lat.e_l + e_l if cfg.residuals else e_l
    else:
        e_l = lat.e_l
    if len(src_ol):
        e_ol = edge_mlp_forward(block.f_ol, lat.e_ol, lat.v_o, src_ol, lat.v_l, dst_ol)
        e_ol = lat.e_ol + e_ol if cfg.residuals else e_ol
    else:
        e_ol = lat.e_ol

    if cfg.ablated:
        e_om, e_mo, v_m, v_o = lat.e_om, lat.e_mo, lat.v_m, lat.v_o
    else:
        src_om, dst_om, _ = gt.edges["e_om"]
        src_mo, dst_mo, _ = gt.edges["e_mo"]
        e_om = edge_mlp_forward(block.f_om, lat.e_om, lat.v_o, src_om, lat.v_m, dst_om)
        e_mo = edge_mlp_forward(block.f_mo, lat.e_mo, lat.v_m, src_mo, lat.v_o, dst_mo)
        if cfg.residuals:
            e_om = lat.e_om + e_om
            e_mo = lat.e_mo + e_mo
        agg_om = _scatter_sum(e_om, dst_om, gt.num_mesh)
        agg_mo = _scatter_sum(e_mo, dst_mo, gt.num_objects)
        v_m = block.f_m(torch.cat([lat.v_m, agg_om], dim=-1))
        v_o = block.f_o(torch.cat([lat.v_o, agg_mo], dim=-1))
        if cfg.residuals:
            v_m = lat.v_m + v_m
            v_o = lat.v_o + v_o

    agg_l = _scatter_sum(e_l, dst_l, gt.num_liquid)
    agg_ol = _scatter_sum(e_ol, dst_ol, gt.num_liquid)
    v_l = block.f_l(torch.cat([lat.v_l, agg_l, agg_ol], dim=-1))
    if cfg.residuals:
        v_l = lat.v_l + v_l

    return LatentGraph(v_l=v_l, v_o=v_o, v_m=v_m, e_l=e_l, e_ol=e_ol, e_om=e_om, e_mo=e_mo, gt=gt)


@dataclass
class Tape:
    output: torch.Tensor
    params: ModelParams
    leaves: dict
    consumed: bool = False


@dataclass
class ForwardResult:
    accel: torch.Tensor  # (N, 3) normalized accelerations, liquid nodes only
    tape: Tape


def forward(
    graph: SimGraph | GraphTensors,
    params: ModelParams,
    norm=None,
    want_input_grads: bool = False,
) -> ForwardResult:
    """Full pass: encode, P processor blocks, decode liquid-node latents."""
    if isinstance(graph, GraphTensors):
        gt = graph
    else:
        gt = prepare_graph(graph, norm, params.dtype, want_input_grads)
    if params.cfg.ablated and gt.num_mesh:
        raise NetError("shape-error: ablated model fed a graph with mesh nodes")

    lat = encode(gt, params)
    for block in params.blocks:
        lat = process_block(lat, block, params.cfg)
    accel = params.decoder(lat.v_l)
    return ForwardResult(accel=accel, tape=Tape(output=accel, params=params, leaves=gt.leaves))


def backward(tape: Tape, seed: torch.Tensor) -> dict:
    """Vector-Jacobian product: gradients of <seed, output> w.r.t. params and
    any recorded input-feature leaves. A tape can be used once."""
    if tape.consumed:
        raise NetError("tape-consumed")
    tape.consumed = True
    names, tensors = tape.params.parameter_list()
    leaf_names = list(tape.leaves)
    leaf_tensors = [tape.leaves[k] for k in leaf_names]
    grads = torch.autograd.grad(
        tape.output,
        list(tensors) + leaf_tensors,
        grad_outputs=seed.to(tape.output.dtype),
        allow_unused=True,
    )
    out = {}
    for name, g, t in zip(names, grads[: len(names)], tensors):
        out[name] = torch.zeros_like(t) if g is None else g
    inputs = {}
    for name, g, t in zip(leaf_names, grads[len(names):], leaf_tensors):
        inputs[name] = torch.zeros_like(t) if g is None else g
    out["inputs"] = inputs
    return out


# ---------------------------------------------------------------------------
# Checkpoint container format: named f32 tensors plus a JSON config block
# ---------------------------------------------------------------------------


def write_tensor_file(path, config: dict, tensors: dict) -> None:
    """Write `FGN1` container: magic, version, JSON config, named f32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_tensor_file(path):
    """Read an `FGN1` container. Returns (config dict, {name: f32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise NetError(f"not a checkpoint container: {path}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise NetError(f"unsupported container version {version}")
    (jlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + jlen])
    off += jlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
    return config, tensors


def params_to_tensors(params: ModelParams) -> dict:
    return {f"model.{k}": v.detach().cpu().numpy() for k, v in params.named_parameters()}


def save_checkpoint(path, params: ModelParams, norm=None, extra: Optional[dict] = None,
                    adam_tensors: Optional[dict] = None) -> None:
    config = {
        "net": params.cfg.to_dict(),
        "dims": params.dims.to_dict(),
    }
    if extra:
        config.update(extra)
    tensors = params_to_tensors(params)
    if norm is not None:
        tensors.update({f"norm.{k}": v for k, v in norm.state_tensors().items()})
    if adam_tensors:
        tensors.update({f"adam.{k}": v for k, v in adam_tensors.items()})
    write_tensor_file(path, config, tensors)


def load_checkpoint(path, dtype: torch.dtype = torch.float32):
    """Load params (+ config and raw tensors) from a checkpoint file."""
    config, tensors = read_tensor_file(path)
    cfg = NetConfig(**config["net"])
    dims = FeatureDims(**config["dims"])
    params = ModelParams(cfg, dims, seed=0).to(dtype)
    state = {k[len("model."):]: torch.as_tensor(v.copy()) for k, v in tensors.items()
             if k.startswith("model.")}
    params.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return params, config, tensors
