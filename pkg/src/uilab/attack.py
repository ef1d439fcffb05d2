"""Unlearning inversion: recover the forgotten sample from (theta_o, theta_observed).

The attacker optimizes a virtual input x' so that the parameter difference
produced by unlearning x' from theta_o points the same way as the observed
difference. All candidates (label x restart) are optimized together as one
batch; selection afterwards uses the order (loss, label, restart).

Two gradient engines:

``fd_pair``
    For single-step unlearning, Delta1 = eta * grad_theta L(theta_o; x').
    With u = d loss / d Delta1, the input gradient is
    eta * d/dx' <grad_theta L, u>, which equals the directional derivative of
    grad_x L along u in parameter space. Two input gradients at
    theta_o +/- eps*u estimate it.
``fd_full``
    Central differences of the scalar loss over every pixel. Slow, exact up
    to truncation, and the only engine for the defense-aware attack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from uilab._kernels import layer_meta, shield_delta_rows
from uilab.defense import DefenseConfig, shield_rows
from uilab.errors import NoSignalError, NumericalError, ValidationError
from uilab.model import (
    ACTIVATIONS,
    ArchSpec,
    ParamVector,
    Sample,
    _act,
    _act_deriv,
    batch_forward,
    batch_loss_grad,
    softmax,
    unflatten,
)
from uilab.unlearning import UnlearnConfig, diffparm, ga_unlearn

ENGINES = ("fd_pair", "fd_full")
LABEL_MODES = ("enumerate", "known")


@dataclass(frozen=True)
class AttackConfig:
    lr: float = 0.1
    iters: int = 400
    tv_weight: float = 1e-3
    grad_engine: str = "fd_pair"
    restarts: int = 3
    label_mode: str = "enumerate"
    adaptive: bool = False
    # defense-aware refinement budget (fd_full through the defense is costly)
    adaptive_iters: int = 8
    adaptive_lr: float = 0.02
    fd_epsilon_scale: float = 1e-4
    fd_h: float = 1e-5
    # lr multiplied by 0.1 at each of these fractions of iters
    lr_decay_at: tuple = ()
    # unlearning hyperparameters the attacker simulates (threat model: known)
    eta: float = 0.05
    steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.grad_engine not in ENGINES:
            raise ValidationError(f"unknown gradient engine {self.grad_engine!r}")
        if self.label_mode not in LABEL_MODES:
            raise ValidationError(f"unknown label mode {self.label_mode!r}")
        if not self.lr > 0 or self.iters < 0 or self.restarts < 1 or self.tv_weight < 0:
            raise ValidationError("attack needs lr > 0, iters >= 0, restarts >= 1, tv_weight >= 0")
        if not self.fd_epsilon_scale > 0 or not self.fd_h > 0:
            raise ValidationError("finite-difference scales must be positive")
        if self.adaptive_iters < 0 or not self.adaptive_lr > 0:
            raise ValidationError("adaptive_iters must be >= 0 and adaptive_lr > 0")
        if not self.eta > 0 or self.steps < 0:
            raise ValidationError("simulated unlearning needs eta > 0 and steps >= 0")


@dataclass
class Reconstruction:
    pixels: np.ndarray
    label_guess: int
    final_loss: float
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# objective pieces


def simulate_unlearning(theta_o: ParamVector, x_virtual, y_virtual: int, eta: float, k: int) -> np.ndarray:
    """Delta1 for one virtual sample; same arithmetic as ``ga_unlearn``."""
    x = x_virtual if isinstance(x_virtual, Sample) else Sample(np.asarray(x_virtual), y_virtual)
    x = Sample(x.pixels, y_virtual)
    theta_u1 = ga_unlearn(theta_o, x, UnlearnConfig("ga", eta, k))
    return diffparm(theta_u1, theta_o)


def simulate_rows(arch: ArchSpec, theta_o: np.ndarray, X: np.ndarray, y: np.ndarray,
                  eta: float, k: int) -> np.ndarray:
    """Delta1 for a batch of virtual samples, shape (B, n)."""
    if k == 0:
        return np.zeros((len(X), arch.num_params))
    _, g, _ = batch_loss_grad(arch, theta_o, X, y, per_sample=True)
    rows = np.broadcast_to(theta_o, g.shape) + eta * g
    for _ in range(k - 1):
        _, g, _ = batch_loss_grad(arch, rows, X, y)
        rows = rows + eta * g
    return rows - theta_o


def attack_loss(delta_obs, delta_sim) -> float:
    """Cosine distance 1 - cos(Delta_obs, Delta1)."""
    a = np.asarray(delta_obs, dtype=np.float64)
    b = np.asarray(delta_sim, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NoSignalError("attack loss needs non-zero parameter differences")
    return float(1.0 - np.dot(a, b) / (na * nb))


def _cos_rows(obs: np.ndarray, S: np.ndarray, want_grad: bool = True):
    """Returns loss (B,), dloss/dS (B, n). Zero-norm rows get loss 1, gradient 0."""
    n_obs = np.linalg.norm(obs)
    nS = np.linalg.norm(S, axis=1)
    ok = nS > 0.0
    safe = np.where(ok, nS, 1.0)
    cos = (S @ obs) / (n_obs * safe)
    cos = np.where(ok, cos, 0.0)
    if not want_grad:
        return 1.0 - cos, None
    u = -(obs[None, :] / (n_obs * safe)[:, None] - (cos / safe ** 2)[:, None] * S)
    u[~ok] = 0.0
    return 1.0 - cos, u


def tv_value_grad(X: np.ndarray, dims: tuple[int, int, int], beta: float = 1e-6):
    """Smoothed anisotropic total variation, averaged over neighbour pairs."""
    h, w, c = dims
    img = X.reshape(len(X), h, w, c)
    dv = np.diff(img, axis=1)
    dh = np.diff(img, axis=2)
    count = dv[0].size + dh[0].size
    sv = np.sqrt(dv * dv + beta)
    sh = np.sqrt(dh * dh + beta)
    val = (sv.sum(axis=(1, 2, 3)) + sh.sum(axis=(1, 2, 3))) / count
    gv = dv / sv / count
    gh = dh / sh / count
    g = np.zeros_like(img)
    g[:, 1:] += gv
    g[:, :-1] -= gv
    g[:, :, 1:] += gh
    g[:, :, :-1] -= gh
    return val, g.reshape(len(X), -1)


# ---------------------------------------------------------------------------
# gradient engines, batched over candidates


def _fd_pair(arch, theta_o, obs, X, y, cfg):
    """fd_pair without materializing any (K, n) array.

    Per-sample gradients are per-layer outer products dz (x) a, so u and the
    models theta_o +/- eps*u are all "shared matrix + rank-one" per layer.
    """
    layers = unflatten(arch, theta_o)
    obs_layers = unflatten(arch, obs)
    K = len(X)
    logits, (_, acts, pre) = batch_forward(arch, theta_o, X)

    seed = softmax(logits)
    seed[np.arange(K), y] -= 1.0
    dzs = [None] * len(layers)
    dz = seed
    for i in range(len(layers) - 1, -1, -1):
        dzs[i] = dz
        if i > 0:
            dz = (dz @ layers[i][0]) * _act_deriv(arch.activation, pre[i - 1], acts[i])

    # <obs, g>, ||g||^2 per candidate
    dot = np.zeros(K)
    gg = np.zeros(K)
    for (O, ob), a, dz in zip(obs_layers, acts, dzs):
        dot += np.einsum("ko,ko->k", dz @ O, a) + dz @ ob
        gg += np.einsum("ko,ko->k", dz, dz) * (np.einsum("ki,ki->k", a, a) + 1.0)
    n_obs = np.linalg.norm(obs)
    gn = np.sqrt(gg)
    ok = gn > 0.0
    gn_safe = np.where(ok, gn, 1.0)
    cos = np.where(ok, dot / (n_obs * gn_safe), 0.0)
    loss = 1.0 - cos
    # u = A*obs + C*g  (S = eta*g folded into C)
    s_norm = cfg.eta * gn_safe
    A = np.where(ok, -1.0 / (n_obs * s_norm), 0.0)
    C = np.where(ok, cos / s_norm ** 2 * cfg.eta, 0.0)
    uu = A * A * n_obs ** 2 + 2 * A * C * dot + C * C * gg
    un = np.sqrt(np.maximum(uu, 0.0))
    eps = cfg.fd_epsilon_scale * (1.0 + np.linalg.norm(theta_o)) / np.maximum(un, 1e-30)

    # rows of the perturbed batch: first K at +eps, next K at -eps
    sgn = np.concatenate([eps, -eps])
    p = (sgn * np.tile(A, 2))[:, None]
    q = (sgn * np.tile(C, 2))[:, None]
    X2 = np.concatenate([X, X])
    y2 = np.concatenate([y, y])
    a2 = [np.concatenate([a, a]) for a in acts]
    dz2 = [np.concatenate([d, d]) for d in dzs]
    h = X2
    hs, zs = [h], []
    last = len(layers) - 1
    for i, ((W, b), (O, ob)) in enumerate(zip(layers, obs_layers)):
        z = h @ W.T + b + p * (h @ O.T + ob) + q * dz2[i] * (np.einsum("ki,ki->k", a2[i], h)[:, None] + 1.0)
        zs.append(z)
        h = z if i == last else _act(arch.activation, z)
        hs.append(h)
    e = softmax(h)
    e[np.arange(2 * K), y2] -= 1.0
    for i in range(last, -1, -1):
        W, _ = layers[i]
        O, _ = obs_layers[i]
        dh = e @ W + p * (e @ O) + q * a2[i] * np.einsum("ko,ko->k", dz2[i], e)[:, None]
        if i > 0:
            e = dh * _act_deriv(arch.activation, zs[i - 1], hs[i])
    grad = cfg.eta * (dh[:K] - dh[K:]) / (2.0 * eps[:, None])
    return loss, grad


def _fd_pair_dense(arch, theta_o, obs, X, y, cfg):
    """Reference fd_pair that builds u and theta_o +/- eps*u explicitly."""
    _, g, _ = batch_loss_grad(arch, theta_o, X, y, per_sample=True)
    loss, u = _cos_rows(obs, cfg.eta * g)
    un = np.linalg.norm(u, axis=1)
    eps = cfg.fd_epsilon_scale * (1.0 + np.linalg.norm(theta_o)) / np.maximum(un, 1e-30)
    step = eps[:, None] * u
    _, _, gp = batch_loss_grad(arch, theta_o + step, X, y, want_params=False, want_input=True)
    _, _, gm = batch_loss_grad(arch, theta_o - step, X, y, want_params=False, want_input=True)
    return loss, cfg.eta * (gp - gm) / (2.0 * eps[:, None])


def _fd_full(obs, X, y, cfg, simulate, chunk=64):
    """Numerical gradient of the loss; ``simulate(X, y) -> (B, n)`` rows."""
    B, d = X.shape
    grad = np.empty_like(X)
    loss, _ = _cos_rows(obs, simulate(X, y), want_grad=False)
    h = cfg.fd_h
    for b in range(B):
        eye = np.eye(d)
        grad_b = np.empty(d)
        for start in range(0, d, chunk):
            idx = np.arange(start, min(start + chunk, d))
            plus = X[b] + h * eye[idx]
            minus = X[b] - h * eye[idx]
            both = np.concatenate([plus, minus])
            lab = np.full(len(both), y[b])
            lo, _ = _cos_rows(obs, simulate(both, lab), want_grad=False)
            grad_b[idx] = (lo[:len(idx)] - lo[len(idx):]) / (2.0 * h)
        grad[b] = grad_b
    return loss, grad


def _plain_simulator(arch, theta_o, cfg):
    return lambda X, y: simulate_rows(arch, theta_o, X, y, cfg.eta, cfg.steps)


def _defended_simulator(arch, theta_o, cfg, defense_cfg: DefenseConfig, fused: bool = True):
    """Simulated Delta1 passed through the known defense, attacker's own seed.

    ``fused`` selects the numba kernel; otherwise the numpy reference loop.
    """
    z = np.random.default_rng(cfg.seed).standard_normal(arch.num_params)
    meta = layer_meta(arch)
    act = ACTIVATIONS.index(arch.activation)

    def sim(X, y):
        D = simulate_rows(arch, theta_o, X, y, cfg.eta, cfg.steps)
        if fused:
            delta, ok = shield_delta_rows(
                theta_o, D, X, z, meta, act, defense_cfg.output == "softmax",
                defense_cfg.init == "aim", defense_cfg.fixed_sigma, defense_cfg.lr,
                defense_cfg.lr_relative, defense_cfg.lambda1, defense_cfg.lambda2, defense_cfg.iters,
            )
            if not ok.all():
                raise NumericalError("non-finite loss inside simulated defense")
        else:
            if defense_cfg.init == "aim":
                d0 = np.mean(np.abs(D), axis=1, keepdims=True) * z
            else:
                d0 = np.broadcast_to(defense_cfg.fixed_sigma * z, D.shape).copy()
            delta = shield_rows(arch, theta_o + D, D, X, d0, defense_cfg)
        return D + delta

    return sim


def attack_objective_grad(theta_o: ParamVector, x_virtual, y_virtual, delta_obs, cfg: AttackConfig,
                          simulate=None):
    """Loss and pixel gradient for one virtual input (flat vector)."""
    X = np.asarray(x_virtual, dtype=np.float64).reshape(1, -1)
    loss, grad = _objective(theta_o.arch, theta_o.values, np.asarray(delta_obs, dtype=np.float64),
                            X, np.array([y_virtual]), cfg, simulate)
    return float(loss[0]), grad[0]


def attack_grad(theta_o: ParamVector, x_virtual, y_virtual, delta_obs, cfg: AttackConfig) -> np.ndarray:
    return attack_objective_grad(theta_o, x_virtual, y_virtual, delta_obs, cfg)[1]


def _objective(arch, theta_o, obs, X, y, cfg, simulate=None):
    if simulate is None and cfg.grad_engine == "fd_pair":
        if cfg.steps != 1:
            raise ValidationError("fd_pair engine requires single-step unlearning; use fd_full")
        loss, grad = _fd_pair(arch, theta_o, obs, X, y, cfg)
    else:
        loss, grad = _fd_full(obs, X, y, cfg, simulate or _plain_simulator(arch, theta_o, cfg))
    if cfg.tv_weight > 0:
        _, tg = tv_value_grad(X, arch.input_dims)
        grad = grad + cfg.tv_weight * tg
    if not np.all(np.isfinite(grad)) or not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite attack gradient")
    return loss, grad


# ---------------------------------------------------------------------------
# drivers


def _observed_delta(theta_o: ParamVector, theta_obs: ParamVector) -> np.ndarray:
    obs = diffparm(theta_obs, theta_o)
    if not np.any(obs):
        raise NoSignalError("no signal: observed model equals the original")
    return obs


def _candidates(arch: ArchSpec, cfg: AttackConfig, label):
    if cfg.label_mode == "known":
        if label is None:
            raise ValidationError("label_mode 'known' needs the label")
        labels = [int(label)]
    else:
        labels = list(range(arch.num_classes))
    y, r, X = [], [], []
    for lab in labels:
        for rs in range(cfg.restarts):
            rng = np.random.default_rng([cfg.seed, lab, rs])
            X.append(rng.uniform(0.0, 1.0, arch.input_size))
            y.append(lab)
            r.append(rs)
    return np.array(X), np.array(y), np.array(r)


def _lr_at(cfg: AttackConfig, t: int) -> float:
    drops = sum(1 for f in cfg.lr_decay_at if t > f * cfg.iters)
    return cfg.lr * 0.1 ** drops


def _optimize(arch, theta_o, obs, cfg, X, y, r, simulate=None) -> Reconstruction:
    """Adam on all candidate pixels, clamped to [0, 1] after every step."""
    X = X.copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for t in range(1, cfg.iters + 1):
        loss, grad = _objective(arch, theta_o, obs, X, y, cfg, simulate)
        history.append(loss)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        X = X - _lr_at(cfg, t) * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.clip(X, 0.0, 1.0, out=X)
    sim = simulate or _plain_simulator(arch, theta_o, cfg)
    final, _ = _cos_rows(obs, sim(X, y), want_grad=False)
    history.append(final)
    best = min(range(len(y)), key=lambda i: (final[i], y[i], r[i]))
    trace = [float(h[best]) for h in history]
    px = X[best].reshape(arch.input_dims)
    return Reconstruction(px, int(y[best]), float(final[best]), trace)


def run_uia(theta_o: ParamVector, theta_obs: ParamVector, cfg: AttackConfig,
            label: int | None = None) -> Reconstruction:
    """Cosine gradient-matching reconstruction against an observed model."""
    obs = _observed_delta(theta_o, theta_obs)
    X, y, r = _candidates(theta_o.arch, cfg, label)
    return _optimize(theta_o.arch, theta_o.values, obs, cfg, X, y, r)


def adaptive_uia(theta_o: ParamVector, theta_obs: ParamVector, defense_cfg: DefenseConfig,
                 cfg: AttackConfig, label: int | None = None,
                 init: Reconstruction | None = None) -> Reconstruction:
    """Defense-aware variant: every simulated Delta1 goes through the defense first.

    Without ``init`` this is ``run_uia`` with the defended simulator and the
    fd_full engine. With ``init`` it refines an earlier reconstruction for
    ``cfg.adaptive_iters`` steps at ``cfg.adaptive_lr``, keeping its label.
    """
    obs = _observed_delta(theta_o, theta_obs)
    arch = theta_o.arch
    sim = _defended_simulator(arch, theta_o.values, cfg, defense_cfg)
    if init is None:
        full = replace(cfg, grad_engine="fd_full")
        X, y, r = _candidates(arch, cfg, label)
    else:
        full = replace(cfg, grad_engine="fd_full", iters=cfg.adaptive_iters,
                       lr=cfg.adaptive_lr, lr_decay_at=())
        X = init.pixels.reshape(1, -1).astype(np.float64)
        y = np.array([init.label_guess])
        r = np.array([0])
    return _optimize(arch, theta_o.values, obs, full, X, y, r, sim)


def closed_form_linear_recon(delta_obs, arch: ArchSpec) -> Reconstruction:
    """Direct recovery for a model without hidden layers.

    Each weight row of the difference is a scalar multiple of x; the row of
    largest norm belongs to the true class.
    """
    if arch.hidden_widths:
        raise ValidationError("closed-form recovery needs a model without hidden layers")
    obs = np.asarray(delta_obs, dtype=np.float64)
    if not np.any(obs):
        raise NoSignalError("no signal: zero parameter difference")
    d = arch.input_size
    W = obs[: d * arch.num_classes].reshape(arch.num_classes, d)
    norms = np.linalg.norm(W, axis=1)
    row = int(np.argmax(norms))
    v = W[row]
    if v.sum() < 0:
        v = -v
    top = v.max()
    px = np.clip(v / top, 0.0, 1.0) if top > 0 else np.zeros_like(v)
    return Reconstruction(px.reshape(arch.input_dims), row, 0.0, [])
