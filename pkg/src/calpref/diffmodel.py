"""Toy conditional denoiser with exact reverse-mode gradients.

The network is a small MLP over ``[x_t, time features of lambda_t, prompt
embedding]`` with SiLU activations. Its output is the schedule's native head:
``eps`` for ``ddpm_sqrt`` and the velocity ``eps - x0`` for ``rectified_flow``.
Everything runs in float64 on numpy; gradients are derived by hand so they can
be checked against finite differences.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ArchMismatch, MissingArtifact, SchemaVersionMismatch, ShapeMismatch, UnknownPrompt
from .schedule import NoiseSchedule, WeightingSpec, head_weight, shift_timestep

SCHEMA_VERSION = 1
_MAGIC = b"CALPREF-CKPT\n"


@dataclass(frozen=True)
class Arch:
    input_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    prompts: tuple[str, ...] = ("p0",)
    prompt_dim: int = 8
    n_freqs: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "prompts", tuple(str(p) for p in self.prompts))
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError("prompt ids must be unique")

    @property
    def n_time_features(self) -> int:
        return 1 + 2 * self.n_freqs

    @property
    def in_features(self) -> int:
        return self.input_dim + self.n_time_features + self.prompt_dim

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        dims = [self.in_features, *self.hidden, self.input_dim]
        out = []
        for k in range(len(dims) - 1):
            out.append((f"W{k}", (dims[k], dims[k + 1])))
            out.append((f"b{k}", (dims[k + 1],)))
        out.append(("embed", (len(self.prompts), self.prompt_dim)))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def prompt_index(self, prompt_ids) -> np.ndarray:
        lookup = {p: i for i, p in enumerate(self.prompts)}
        ids = [prompt_ids] if isinstance(prompt_ids, str) else list(prompt_ids)
        try:
            return np.array([lookup[p] for p in ids], dtype=np.int64)
        except KeyError as exc:
            raise UnknownPrompt(exc.args[0]) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["prompts"] = list(self.prompts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), tuple(d["prompts"]), int(d["prompt_dim"]), int(d["n_freqs"]))


@dataclass
class DenoiserParams:
    arch: Arch
    theta: np.ndarray
    role: str = "trainable"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params,):
            raise ShapeMismatch(f"theta has {self.theta.size} entries, arch needs {self.arch.n_params}")
        if self.role not in ("trainable", "reference"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "reference":
            self.theta = self.theta.copy()
            self.theta.setflags(write=False)

    def unpack(self) -> dict[str, np.ndarray]:
        return unpack(self.arch, self.theta)

    def frozen(self) -> "DenoiserParams":
        """Read-only reference snapshot of these parameters."""
        return DenoiserParams(self.arch, self.theta, "reference", dict(self.meta))

    def trainable_copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.theta.copy(), "trainable", dict(self.meta))

    def digest(self) -> str:
        return hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest()


def unpack(arch: Arch, theta: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in arch.shapes():
        size = int(np.prod(shape))
        out[name] = theta[pos:pos + size].reshape(shape)
        pos += size
    return out


def init_params(arch: Arch, seed: int, zero_last: bool = True) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    parts = []
    n_layers = len(arch.hidden) + 1
    for name, shape in arch.shapes():
        if name.startswith("W"):
            last = int(name[1:]) == n_layers - 1
            if last and zero_last:
                parts.append(np.zeros(shape))
            else:
                parts.append(rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape))
        elif name == "embed":
            parts.append(rng.normal(0.0, 1.0, size=shape))
        else:
            parts.append(np.zeros(shape))
    return DenoiserParams(arch, np.concatenate([p.ravel() for p in parts]))


def _check_same_arch(a: DenoiserParams, b: DenoiserParams):
    if a.arch != b.arch:
        raise ArchMismatch("parameter sets have different architectures")


# --- forward / backward -----------------------------------------------------------

def time_features(lam: np.ndarray, n_freqs: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)[:, None]
    freqs = 2.0 ** np.arange(n_freqs) / 8.0
    return np.concatenate([lam / 10.0, np.sin(lam * freqs), np.cos(lam * freqs)], axis=1)


def _silu(a):
    s = expit(a)
    return a * s, s


def forward(params: DenoiserParams, xt: np.ndarray, lam: np.ndarray, prompt_idx: np.ndarray, keep: bool = False):
    """Raw network output (the head) for a batch; optionally keep activations."""
    arch = params.arch
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    if xt.shape[1] != arch.input_dim:
        raise ShapeMismatch(f"expected inputs of dimension {arch.input_dim}, got {xt.shape[1]}")
    prompt_idx = np.asarray(prompt_idx, dtype=np.int64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (xt.shape[0],))
    p = params.unpack()
    h = np.concatenate([xt, time_features(lam, arch.n_freqs), p["embed"][prompt_idx]], axis=1)
    cache = {"inputs": [h], "pre": [], "sig": [], "prompt_idx": prompt_idx}
    n_hidden = len(arch.hidden)
    for k in range(n_hidden):
        a = h @ p[f"W{k}"] + p[f"b{k}"]
        h, s = _silu(a)
        if keep:
            cache["pre"].append(a)
            cache["sig"].append(s)
            cache["inputs"].append(h)
    out = h @ p[f"W{n_hidden}"] + p[f"b{n_hidden}"]
    return (out, cache) if keep else out


def backward(params: DenoiserParams, cache: dict, g_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(g_out * out)`` with respect to the flat parameter vector."""
    arch = params.arch
    p = params.unpack()
    grads = {name: np.zeros(shape) for name, shape in arch.shapes()}
    n_hidden = len(arch.hidden)
    g = g_out
    for k in range(n_hidden, -1, -1):
        h_in = cache["inputs"][k]
        grads[f"W{k}"] = h_in.T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        g = g @ p[f"W{k}"].T
        if k > 0:
            a, s = cache["pre"][k - 1], cache["sig"][k - 1]
            g = g * (s * (1.0 + a * (1.0 - s)))
    emb_start = arch.input_dim + arch.n_time_features
    # np.add.at accumulates in index order, so the reduction order is fixed
    np.add.at(grads["embed"], cache["prompt_idx"], g[:, emb_start:])
    return np.concatenate([grads[name].ravel() for name, _ in arch.shapes()])


# --- forward process ------------------------------------------------------------

@dataclass
class NoisedBatch:
    """Clean samples, noise and times; ``xt = alpha_t x0 + sigma_t eps``."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    prompt_idx: np.ndarray
    schedule: NoiseSchedule

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        self.t = np.broadcast_to(np.asarray(self.t, dtype=np.float64), (self.x0.shape[0],)).copy()
        self.prompt_idx = np.broadcast_to(np.asarray(self.prompt_idx, dtype=np.int64), (self.x0.shape[0],)).copy()
        if self.x0.shape != self.eps.shape:
            raise ShapeMismatch("x0 and eps must have the same shape")

    @property
    def lam(self) -> np.ndarray:
        return self.schedule.lam(self.t)

    @property
    def xt(self) -> np.ndarray:
        a = self.schedule.alpha(self.t)[:, None]
        s = self.schedule.sigma(self.t)[:, None]
        return a * self.x0 + s * self.eps

    @property
    def target(self) -> np.ndarray:
        """Regression target of the network head."""
        if self.schedule.head == "velocity":
            return self.eps - self.x0
        return self.eps

    def __len__(self):
        return self.x0.shape[0]

    @classmethod
    def concat(cls, batches: Sequence["NoisedBatch"]) -> "NoisedBatch":
        return cls(
            np.concatenate([b.x0 for b in batches]),
            np.concatenate([b.eps for b in batches]),
            np.concatenate([b.t for b in batches]),
            np.concatenate([b.prompt_idx for b in batches]),
            batches[0].schedule,
        )


def noise_batch(x0, prompt_idx, schedule: NoiseSchedule, rng: np.random.Generator, t=None) -> NoisedBatch:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = rng.standard_normal(x0.shape)
    if t is None:
        t = rng.uniform(schedule.t_min, schedule.t_max, size=x0.shape[0])
    return NoisedBatch(x0, eps, t, prompt_idx, schedule)


def head_to_eps(head: np.ndarray, xt: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    if schedule.head == "eps":
        return head
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return xt + (1.0 - t) * head


def head_to_x0(head: np.ndarray, xt: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if schedule.head == "velocity":
        return xt - t * head
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    return (xt - s * head) / a


def eps_to_velocity(eps_hat: np.ndarray, xt: np.ndarray, t) -> np.ndarray:
    """Inverse of ``head_to_eps`` for rectified flow."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (eps_hat - xt) / (1.0 - t)


def predict_head(params: DenoiserParams, xt, prompt_ids, t, schedule: NoiseSchedule) -> np.ndarray:
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    idx = np.broadcast_to(params.arch.prompt_index(prompt_ids), (xt.shape[0],))
    t = np.broadcast_to(schedule.clamp(np.asarray(t, dtype=np.float64)), (xt.shape[0],))
    return forward(params, xt, schedule.lam(t), idx)


def denoise(params: DenoiserParams, xt, prompt_id, t, schedule: NoiseSchedule) -> np.ndarray:
    """eps-prediction at ``(xt, t)``; velocity heads are converted exactly."""
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (xt.shape[0],))
    head = predict_head(params, xt, prompt_id, t_arr, schedule)
    return head_to_eps(head, xt, t_arr, schedule)


def squared_errors(params: DenoiserParams, batch: NoisedBatch, keep: bool = False):
    """Per-sample ``||head(x_t) - target||^2``."""
    out = forward(params, batch.xt, batch.lam, batch.prompt_idx, keep=keep)
    if keep:
        out, cache = out
    resid = out - batch.target
    err = np.sum(resid * resid, axis=1)
    return (err, resid, cache) if keep else err


def denoise_grad(params: DenoiserParams, batch: NoisedBatch, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum_b upstream_b * ||head(x_t_b) - target_b||^2`` w.r.t. theta.

    Returns ``(grad, per_sample_errors)``. Reference parameters are rejected.
    """
    if params.role != "trainable":
        raise PermissionError("gradients are never taken with respect to reference parameters")
    err, resid, cache = squared_errors(params, batch, keep=True)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    return backward(params, cache, 2.0 * up * resid), err


def implicit_reward(theta: DenoiserParams, ref: DenoiserParams, batch: NoisedBatch,
                    spec: WeightingSpec, weights=None) -> np.ndarray:
    """Per-sample implicit reward ``-w(lambda) * (err_theta - err_ref)``.

    The lambda-derivative is absorbed into the weight as -1, so a lower error
    than the reference gives a positive reward. ``weights`` overrides the
    weighting computed from ``spec``.
    """
    _check_same_arch(theta, ref)
    w = head_weight(batch.schedule, spec, batch.lam) if weights is None else np.asarray(weights, dtype=np.float64)
    return -w * (squared_errors(theta, batch) - squared_errors(ref, batch))


# --- sampling ---------------------------------------------------------------------

HeadFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def time_grid(steps: int, shift: float | None = None) -> np.ndarray:
    grid = np.linspace(1.0, 0.0, steps + 1)
    if shift is not None and shift != 1.0:
        grid = np.asarray(shift_timestep(grid, shift))
    return grid


def integrate(head_fn: HeadFn, x1: np.ndarray, steps: int, schedule: NoiseSchedule, shift: float | None = None) -> np.ndarray:
    """Deterministic sampler from ``t = 1`` to ``t = 0``.

    Euler in t for rectified flow; DDIM (eta = 0) for eps heads. ``head_fn``
    receives ``(x_t, t)`` with t clamped into the schedule's range.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x1, dtype=np.float64)
    grid = time_grid(steps, shift)
    n = x.shape[0]
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        t_eval = float(schedule.clamp(t_cur))
        head = head_fn(x, np.full(n, t_eval))
        if schedule.head == "velocity":
            x = x + (t_next - t_cur) * head
        else:
            x0_hat = head_to_x0(head, x, np.full(n, t_eval), schedule)
            # the last step lands on t_min rather than returning x0_hat, which
            # would be a posterior mean and shrink the sample spread
            t_n = float(schedule.clamp(t_next))
            x = schedule.alpha(t_n) * x0_hat + schedule.sigma(t_n) * head
    return x


def sample_from_noise(params: DenoiserParams, x1: np.ndarray, prompt_idx, steps: int,
                      schedule: NoiseSchedule, shift: float | None = None) -> np.ndarray:
    prompt_idx = np.broadcast_to(np.asarray(prompt_idx, dtype=np.int64), (np.atleast_2d(x1).shape[0],))
    return integrate(lambda x, t: forward(params, x, schedule.lam(t), prompt_idx), np.atleast_2d(x1), steps, schedule, shift)


def sample(params: DenoiserParams, prompt_id: str, n: int = 1, steps: int = 50, seed: int = 0,
           schedule: NoiseSchedule | None = None, shift: float | None = None) -> np.ndarray:
    """Draw ``n`` samples for one prompt; the seed fixes the starting noise."""
    schedule = schedule or NoiseSchedule()
    idx = params.arch.prompt_index(prompt_id)
    x1 = np.random.default_rng(seed).standard_normal((n, params.arch.input_dim))
    return sample_from_noise(params, x1, idx, steps, schedule, shift)


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params: DenoiserParams, **header) -> Path:
    """JSON header line followed by the raw little-endian float64 parameter block."""
    path = Path(path)
    head = {
        "schema_version": SCHEMA_VERSION,
        "arch": params.arch.to_dict(),
        "n_params": params.arch.n_params,
        "role": params.role,
        **params.meta,
        **header,
    }
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(blob + b"\n")
        fh.write(params.theta.astype("<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, role: str | None = None) -> DenoiserParams:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    nl = raw.index(b"\n", len(_MAGIC))
    head = json.loads(raw[len(_MAGIC):nl])
    if head.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: schema {head.get('schema_version')} != {SCHEMA_VERSION}")
    arch = Arch.from_dict(head.pop("arch"))
    theta = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
    stored_role = head.pop("role")
    head.pop("n_params", None)
    head.pop("schema_version", None)
    return DenoiserParams(arch, theta, role or stored_role, head)
