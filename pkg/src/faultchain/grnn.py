"""Time-varying graph recurrent Q-network in plain numpy, with exact reverse-mode gradients.

Every array op broadcasts over leading batch axes: an adjacency of shape ``(..., N, N)``
pairs with node features of shape ``(..., N, F)``. Filter coefficients are stored stacked,
``(K, F_in, F_out)``, with index ``k`` weighting ``B**k X``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "grqn-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass
class GrqnParams:
    H1: np.ndarray  # (K, F, H) input filter
    H2: np.ndarray  # (K, H, H) latent filter
    H3: np.ndarray  # (K, H, G) output filter
    b_Z: np.ndarray  # (H,)
    b_Y: np.ndarray  # (G,)
    W_hid: np.ndarray  # (N*G, D)
    b_hid: np.ndarray  # (D,)
    W_out: np.ndarray  # (D, U)
    b_out: np.ndarray  # (U,)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self))

    @property
    def dims(self) -> dict:
        K, F, H = self.H1.shape
        G = self.H3.shape[2]
        D, U = self.W_out.shape
        return {"K": K, "F": F, "H": H, "G": G, "D": D, "N": self.W_hid.shape[0] // G, "U": U}

    @classmethod
    def shapes(cls, n_bus, n_actions, features=1, hidden=12, out_features=12, hops=3, head_width=64):
        K, F, H, G, D, N, U = hops, features, hidden, out_features, head_width, n_bus, n_actions
        return {
            "H1": (K, F, H), "H2": (K, H, H), "H3": (K, H, G), "b_Z": (H,), "b_Y": (G,),
            "W_hid": (N * G, D), "b_hid": (D,), "W_out": (D, U), "b_out": (U,),
        }

    @classmethod
    def initialize(cls, rng: np.random.Generator, n_bus, n_actions, features=1, hidden=12,
                   out_features=12, hops=3, head_width=64) -> GrqnParams:
        """Uniform ``[-a, a]`` with ``a = 1/sqrt(fan_in)``; draws happen in field order."""
        shapes = cls.shapes(n_bus, n_actions, features, hidden, out_features, hops, head_width)
        K, F, H, G, D = hops, features, hidden, out_features, head_width
        fan_in = {
            "H1": K * F, "H2": K * H, "H3": K * H, "b_Z": K * (F + H), "b_Y": K * H,
            "W_hid": n_bus * G, "b_hid": n_bus * G, "W_out": D, "b_out": D,
        }
        tensors = {}
        for name, shape in shapes.items():
            a = 1.0 / np.sqrt(fan_in[name])
            tensors[name] = rng.uniform(-a, a, size=shape)
        return cls(**tensors)

    @classmethod
    def zeros(cls, n_bus, n_actions, **dims) -> GrqnParams:
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(n_bus, n_actions, **dims).items()})

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names}

    def zeros_like(self) -> GrqnParams:
        return GrqnParams(**{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def copy(self) -> GrqnParams:
        return GrqnParams(**{k: v.copy() for k, v in self.tensors().items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.tensors().values())))

    def size(self) -> int:
        return sum(v.size for v in self.tensors().values())

    # -- checkpoint ----------------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": self.dims,
            "tensors": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.tensors().items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict, n_bus: int | None = None, n_actions: int | None = None) -> GrqnParams:
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise ShapeError("not a supported GRQN checkpoint")
        tensors = {
            k: np.asarray(t["data"], dtype=float).reshape(t["shape"]) for k, t in data["tensors"].items()
        }
        params = cls(**tensors)
        d = params.dims
        expected = cls.shapes(d["N"], d["U"], d["F"], d["H"], d["G"], d["K"], d["D"])
        for k, shape in expected.items():
            if tensors[k].shape != shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {tensors[k].shape}, expected {shape}")
        if n_bus is not None and d["N"] != n_bus:
            raise ShapeError(f"checkpoint built for N={d['N']}, case has N={n_bus}")
        if n_actions is not None and d["U"] != n_actions:
            raise ShapeError(f"checkpoint built for |U|={d['U']}, case has |U|={n_actions}")
        return params

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, n_bus=None, n_actions=None) -> GrqnParams:
        return cls.from_dict(json.loads(Path(path).read_text()), n_bus, n_actions)


@dataclass
class LatentState:
    """Latent node state ``Z`` and the adjacency of the topology it was computed on."""

    Z: np.ndarray  # (..., N, H)
    adjacency: np.ndarray  # (..., N, N)

    @classmethod
    def zeros(cls, n_bus: int, hidden: int, batch: tuple = ()) -> LatentState:
        return cls(np.zeros(batch + (n_bus, hidden)), np.zeros(batch + (n_bus, n_bus)))


# -- graph filters -----------------------------------------------------------------------------


def graph_shift(B: np.ndarray, X: np.ndarray) -> np.ndarray:
    if B.shape[-1] != B.shape[-2] or B.shape[-1] != X.shape[-2]:
        raise ShapeError(f"cannot shift features {X.shape} on adjacency {B.shape}")
    return B @ X


def _shifts(B, X, K):
    out = [X]
    for _ in range(K - 1):
        out.append(graph_shift(B, out[-1]))
    return out


def _matmul_last(a, m):
    # (..., F) @ (F, H) as one 2-D product
    return (a.reshape(-1, a.shape[-1]) @ m).reshape(a.shape[:-1] + (m.shape[-1],))


def _apply(shifts, coeffs):
    K, F, H = coeffs.shape
    return _matmul_last(np.concatenate(shifts, axis=-1), coeffs.reshape(K * F, H))


def graph_filter(B: np.ndarray, X: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """``sum_k (B**k X) coeffs[k]`` by repeated shifting."""
    if coeffs.ndim != 3 or coeffs.shape[0] < 1:
        raise ShapeError("coeffs must have shape (K, F_in, F_out) with K >= 1")
    if X.shape[-1] != coeffs.shape[1]:
        raise ShapeError(f"features {X.shape[-1]} do not match filter input {coeffs.shape[1]}")
    return _apply(_shifts(B, X, coeffs.shape[0]), coeffs)


def _filter_input_grad(B, d_out, coeffs):
    # d/dX of sum_k B^k X C_k, evaluated by Horner's rule on B^T
    K = coeffs.shape[0]
    Bt = np.swapaxes(B, -1, -2)
    terms = _matmul_last(d_out, np.concatenate([c.T for c in coeffs], axis=-1))
    F = coeffs.shape[1]
    g = terms[..., (K - 1) * F:]
    for k in range(K - 2, -1, -1):
        g = Bt @ g + terms[..., k * F:(k + 1) * F]
    return g


def _filter_coeff_grad(shifts, d_out):
    n_out = d_out.shape[-1]
    d2 = d_out.reshape(-1, n_out)
    F = shifts[0].shape[-1]
    cat = np.concatenate(shifts, axis=-1).reshape(-1, len(shifts) * F)
    return (cat.T @ d2).reshape(len(shifts), F, n_out)


def _tanh_grad(y, dy):
    return dy * (1.0 - y * y)


def _sum_leading(a):
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def _outer_sum(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# -- network stages ----------------------------------------------------------------------------


def _check(params: GrqnParams, B, X):
    d = params.dims
    if B.shape[-2:] != (d["N"], d["N"]):
        raise ShapeError(f"adjacency {B.shape} does not match N={d['N']}")
    if X.shape[-2:] != (d["N"], d["F"]):
        raise ShapeError(f"node state {X.shape} does not match (N, F)=({d['N']}, {d['F']})")


def _latent(B, X, prev: LatentState, params, tape=None):
    K = params.H1.shape[0]
    xs = _shifts(B, X, K)
    zs_prev = _shifts(prev.adjacency, prev.Z, K)
    Z = np.tanh(_apply(xs, params.H1) + _apply(zs_prev, params.H2) + params.b_Z)
    if tape is not None:
        tape.update(adj=B, adj_prev=prev.adjacency, xs=xs, zs_prev=zs_prev, Z=Z)
    return LatentState(Z, B)


def _output(latent: LatentState, params, tape=None):
    zs = _shifts(latent.adjacency, latent.Z, params.H3.shape[0])
    Y = np.tanh(_apply(zs, params.H3) + params.b_Y)
    if tape is not None:
        tape.update(zs=zs, Y=Y)
    return Y


def _head(Y, params, tape=None):
    y = Y.reshape(Y.shape[:-2] + (-1,))
    if y.shape[-1] != params.W_hid.shape[0]:
        raise ShapeError(f"flattened output {y.shape[-1]} does not match head input {params.W_hid.shape[0]}")
    h_pre = y @ params.W_hid + params.b_hid
    h = np.maximum(h_pre, 0.0)
    q = h @ params.W_out + params.b_out
    if tape is not None:
        tape.update(y=y, h=h)
    return q


def grnn_step(obs, prev: LatentState, params: GrqnParams) -> LatentState:
    """Next latent state from an observation (anything with ``adjacency`` and ``node_state``)."""
    B, X = np.asarray(obs.adjacency), np.asarray(obs.node_state)
    _check(params, B, X)
    if prev.Z.shape[-1] != params.H2.shape[1]:
        raise ShapeError("latent width does not match H2")
    return _latent(B, X, prev, params)


def grnn_output(latent: LatentState, params: GrqnParams) -> np.ndarray:
    return _output(latent, params)


def q_head(Y: np.ndarray, params: GrqnParams) -> np.ndarray:
    """Q-values from the row-major flattened output features through one ReLU hidden layer."""
    return _head(Y, params)


@dataclass
class ForwardResult:
    q: np.ndarray  # (..., T, U)
    Y: np.ndarray  # (..., T, N, G)
    latent: LatentState
    tape: list[dict]


def forward_arrays(adjacency: np.ndarray, node_state: np.ndarray, z0: LatentState | None,
                   params: GrqnParams, record: bool = True) -> ForwardResult:
    """Unroll over stage axis ``-3`` of ``adjacency (..., T, N, N)`` and ``node_state (..., T, N, F)``."""
    _check(params, adjacency, node_state)
    T = adjacency.shape[-3]
    if T < 1:
        raise ShapeError("empty observation sequence")
    batch = adjacency.shape[:-3]
    if z0 is None:
        z0 = LatentState.zeros(params.dims["N"], params.dims["H"], batch)
    latent, tape, qs, ys = z0, [], [], []
    for t in range(T):
        st = {} if record else None
        latent = _latent(adjacency[..., t, :, :], node_state[..., t, :, :], latent, params, st)
        Y = _output(latent, params, st)
        qs.append(_head(Y, params, st))
        ys.append(Y)
        if record:
            tape.append(st)
    return ForwardResult(np.stack(qs, axis=-2), np.stack(ys, axis=-3), latent, tape)


def forward_sequence(observations, z0: LatentState | None, params: GrqnParams,
                     record: bool = True) -> ForwardResult:
    """Process a list of observations stage by stage starting from latent ``z0`` (zeros if None)."""
    if not observations:
        raise ShapeError("empty observation sequence")
    adj = np.stack([np.asarray(o.adjacency) for o in observations])
    x = np.stack([np.asarray(o.node_state) for o in observations])
    return forward_arrays(adj, x, z0, params, record)


def backward(tape: list[dict], dq: np.ndarray, params: GrqnParams) -> GrqnParams:
    """Gradients of ``sum(dq * q)`` with respect to every parameter, through all stages.

    ``dq`` has the shape of ``ForwardResult.q``. The initial latent state is treated as a
    constant.
    """
    if len(tape) != dq.shape[-2]:
        raise ShapeError(f"tape has {len(tape)} stages, loss gradient has {dq.shape[-2]}")
    grads = params.zeros_like()
    dz_next = None
    for t in range(len(tape) - 1, -1, -1):
        st = tape[t]
        g = dq[..., t, :]
        grads.W_out += _outer_sum(st["h"], g)
        grads.b_out += _sum_leading(g)
        dh = (g @ params.W_out.T) * (st["h"] > 0)
        grads.W_hid += _outer_sum(st["y"], dh)
        grads.b_hid += _sum_leading(dh)
        dY = (dh @ params.W_hid.T).reshape(st["Y"].shape)
        dC = _tanh_grad(st["Y"], dY)
        grads.b_Y += _sum_leading(dC)
        grads.H3 += _filter_coeff_grad(st["zs"], dC)
        dZ = _filter_input_grad(st["adj"], dC, params.H3)
        if dz_next is not None:
            dZ = dZ + dz_next
        dA = _tanh_grad(st["Z"], dZ)
        grads.b_Z += _sum_leading(dA)
        grads.H1 += _filter_coeff_grad(st["xs"], dA)
        grads.H2 += _filter_coeff_grad(st["zs_prev"], dA)
        dz_next = _filter_input_grad(st["adj_prev"], dA, params.H2)
    return grads
