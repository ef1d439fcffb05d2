"""Post-processing defenses applied to an unlearned model.

The main defense adds an optimized perturbation ``delta`` to the unlearned
parameters. It starts from Gaussian noise whose scale is the mean absolute
entry of the parameter difference, then runs Adam on

    privacy + lambda1 * ||delta||^2 + lambda2 * ||f_u(x) - f_{u+delta}(x)||

where ``privacy = 1 + cos(Delta, Delta + delta)``. Noise and pruning
baselines are included for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uilab.errors import NumericalError, ValidationError
from uilab.model import (
    ArchSpec,
    OptimizerState,
    ParamVector,
    batch_backward,
    batch_forward,
    forward,
    optimizer_step,
    param_vjp,
    softmax,
)
from uilab.unlearning import diffparm, saliency_mask

METHODS = ("unlearnshield", "noise", "prune", "none")
INITS = ("aim", "fixed_sigma")
OUTPUTS = ("logits", "softmax")


@dataclass(frozen=True)
class DefenseConfig:
    method: str = "unlearnshield"
    lambda1: float = 0.5
    lambda2: float = 0.5
    # step size; multiplied by the AIM sigma when lr_relative is set
    lr: float = 5.0
    lr_relative: bool = True
    iters: int = 10
    init: str = "aim"
    fixed_sigma: float = 0.01
    noise_std: float = 0.1
    keep_frac: float = 0.1
    output: str = "logits"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown defense method {self.method!r}")
        if self.init not in INITS:
            raise ValidationError(f"unknown defense init {self.init!r}")
        if self.output not in OUTPUTS:
            raise ValidationError(f"unknown output mode {self.output!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda weights must be >= 0")
        if not self.lr > 0:
            raise ValidationError("defense lr must be positive")
        if self.iters < 0:
            raise ValidationError("defense iters must be >= 0")
        # fixed_sigma = 0 is allowed: it switches the initial perturbation off
        if self.fixed_sigma < 0 or self.noise_std < 0:
            raise ValidationError("noise scales must be >= 0")
        if not 0.0 <= self.keep_frac <= 1.0:
            raise ValidationError("keep_frac must lie in [0, 1]")


# absolute step size tuned for large models, kept selectable
ABSOLUTE_LR_DEFENSE = DefenseConfig(lr=1e-5, lr_relative=False)


def aim_sigma(delta_param: np.ndarray) -> float:
    return float(np.mean(np.abs(delta_param)))


def aim_init(delta_param: np.ndarray, seed: int) -> np.ndarray:
    """Gaussian perturbation with std equal to mean |Delta_i|."""
    d = np.asarray(delta_param, dtype=np.float64)
    if d.size < 1:
        raise ValidationError("empty parameter difference")
    return aim_sigma(d) * np.random.default_rng(seed).standard_normal(d.size)


def initial_perturbation(delta_param: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    if cfg.init == "aim":
        return aim_init(delta_param, cfg.seed)
    return cfg.fixed_sigma * np.random.default_rng(cfg.seed).standard_normal(delta_param.size)


# ---------------------------------------------------------------------------
# loss terms, row-wise over (K, n) stacks


def _privacy_rows(D: np.ndarray, d: np.ndarray):
    nD = np.linalg.norm(D, axis=-1)
    if np.any(nD == 0.0):
        raise NumericalError("privacy loss undefined for a zero parameter difference")
    S = D + d
    nS = np.linalg.norm(S, axis=-1)
    ok = nS > 0.0
    safe = np.where(ok, nS, 1.0)
    cos = np.einsum("...i,...i->...", D, S) / (nD * safe)
    cos = np.where(ok, cos, 0.0)
    grad = (D / (nD * safe)[..., None] - (cos / safe ** 2)[..., None] * S)
    grad = np.where(ok[..., None], grad, 0.0)
    return 1.0 + cos, grad, cos


def privacy_loss(delta_param, perturbation) -> float:
    L, _, _ = _privacy_rows(np.asarray(delta_param, dtype=np.float64),
                            np.asarray(perturbation, dtype=np.float64))
    return float(L)


def privacy_grad(delta_param, perturbation) -> np.ndarray:
    _, g, _ = _privacy_rows(np.asarray(delta_param, dtype=np.float64),
                            np.asarray(perturbation, dtype=np.float64))
    return g


def acc_loss(perturbation) -> float:
    d = np.asarray(perturbation, dtype=np.float64)
    return float(np.dot(d, d))


def acc_grad(perturbation) -> np.ndarray:
    return 2.0 * np.asarray(perturbation, dtype=np.float64)


def _output_seed(logits_def, diff, norm, output):
    """Seed on the logits for d||out_def - out_u|| given the output mode."""
    s = diff / norm[:, None]
    if output == "softmax":
        p = softmax(logits_def)
        s = p * (s - np.sum(p * s, axis=1, keepdims=True))
    return s


def _forget_rows(arch: ArchSpec, u_values, d, X, out_u, output):
    """Forget loss (K,) and gradient (K, n) for per-row defended parameters."""
    logits, cache = batch_forward(arch, u_values + d, X)
    out_d = softmax(logits) if output == "softmax" else logits
    diff = out_d - out_u
    norm = np.linalg.norm(diff, axis=1)
    ok = norm > 0.0
    seed = _output_seed(logits, diff, np.where(ok, norm, 1.0), output)
    seed[~ok] = 0.0
    g, _ = batch_backward(arch, cache, seed)
    return norm, g


def _outputs(theta: ParamVector, x, output):
    logits = forward(theta, x)
    return softmax(logits) if output == "softmax" else logits


def forget_loss(theta_u: ParamVector, perturbation, x, output: str = "logits") -> float:
    theta_d = theta_u.with_values(theta_u.values + np.asarray(perturbation, dtype=np.float64))
    return float(np.linalg.norm(_outputs(theta_u, x, output) - _outputs(theta_d, x, output)))


def forget_grad(theta_u: ParamVector, perturbation, x, output: str = "logits") -> np.ndarray:
    d = np.asarray(perturbation, dtype=np.float64)
    theta_d = theta_u.with_values(theta_u.values + d)
    logits = forward(theta_d, x)
    out_d = softmax(logits) if output == "softmax" else logits
    diff = out_d - _outputs(theta_u, x, output)
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        return np.zeros_like(d)
    seed = _output_seed(logits[None, :], diff[None, :], np.array([norm]), output)[0]
    return param_vjp(theta_d, x, seed)


# ---------------------------------------------------------------------------
# optimization loop


def shield_rows(arch: ArchSpec, u_values: np.ndarray, D: np.ndarray, X: np.ndarray,
                delta0: np.ndarray, cfg: DefenseConfig, trace: list | None = None):
    """Optimize K perturbations at once; every argument carries a leading K axis.

    ``u_values`` are the unlearned models, ``D`` their parameter differences,
    ``X`` the flat forget inputs. Returns the final perturbations (K, n).
    """
    d = delta0.copy()
    if cfg.iters == 0 and trace is None:
        return d
    out_logits, _ = batch_forward(arch, u_values, X)
    out_u = softmax(out_logits) if cfg.output == "softmax" else out_logits
    if cfg.lr_relative:
        step = cfg.lr * np.mean(np.abs(D), axis=1, keepdims=True)
        step = np.where(step > 0.0, step, cfg.lr)
    else:
        step = np.full((len(D), 1), cfg.lr)
    state = OptimizerState("adam", 1.0, D.shape[1])
    state.step_size = step
    for it in range(cfg.iters + 1):
        priv, gp, cos = _privacy_rows(D, d)
        acc = np.einsum("ki,ki->k", d, d)
        fl, gf = _forget_rows(arch, u_values, d, X, out_u, cfg.output)
        total = priv + cfg.lambda1 * acc + cfg.lambda2 * fl
        if not np.all(np.isfinite(total)):
            raise NumericalError(f"non-finite defense loss at iteration {it}")
        if trace is not None:
            trace.append({"iter": it, "total": total.copy(), "privacy": priv, "acc": acc,
                          "forget": fl, "cos": cos})
        if it == cfg.iters:
            break
        grad = gp + cfg.lambda1 * 2.0 * d + cfg.lambda2 * gf
        state, d = optimizer_step(state, d, grad)
    return d


def _row_trace(trace):
    return [{k: (v if k == "iter" else float(v[0])) for k, v in rec.items()} for rec in trace]


def unlearnshield(theta_o: ParamVector, theta_u: ParamVector, x, cfg: DefenseConfig):
    """Returns ``(theta_def, trace)``; trace has one record per iterate, init included."""
    D = diffparm(theta_u, theta_o)
    if np.linalg.norm(D) == 0.0:
        raise NumericalError("unlearned model equals the original; nothing to protect")
    delta0 = initial_perturbation(D, cfg)
    px = x.pixels if hasattr(x, "pixels") else np.asarray(x, dtype=np.float64)
    trace: list = []
    d = shield_rows(theta_u.arch, theta_u.values[None, :], D[None, :],
                    px.reshape(1, -1), delta0[None, :], cfg, trace)
    return theta_u.with_values(theta_u.values + d[0]), _row_trace(trace)


def noise_defense(theta_u: ParamVector, cfg: DefenseConfig) -> ParamVector:
    if cfg.noise_std == 0.0:
        return theta_u.copy()
    rng = np.random.default_rng(cfg.seed)
    return theta_u.with_values(theta_u.values + cfg.noise_std * rng.standard_normal(theta_u.values.size))


def prune_delta(D: np.ndarray, keep_frac: float) -> np.ndarray:
    if keep_frac <= 0.0:
        return np.zeros_like(D)
    return np.where(saliency_mask(D, keep_frac), D, 0.0)


def prune_defense(theta_u: ParamVector, theta_o: ParamVector, cfg: DefenseConfig) -> ParamVector:
    """Keep the largest ``keep_frac`` of |Delta| and rebuild from theta_o."""
    if cfg.keep_frac >= 1.0:
        return theta_u.copy()
    D = diffparm(theta_u, theta_o)
    return theta_o.with_values(theta_o.values + prune_delta(D, cfg.keep_frac))


def defend(theta_o: ParamVector, theta_u: ParamVector, x, cfg: DefenseConfig):
    """Dispatch on ``cfg.method``; returns ``(theta_def, trace)``."""
    if cfg.method == "unlearnshield":
        return unlearnshield(theta_o, theta_u, x, cfg)
    if cfg.method == "noise":
        return noise_defense(theta_u, cfg), []
    if cfg.method == "prune":
        return prune_defense(theta_u, theta_o, cfg), []
    return theta_u.copy(), []
