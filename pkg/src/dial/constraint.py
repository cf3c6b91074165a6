"""Risk-sensitive constraint model.

A small network maps each (state, action) pair to Beta shape parameters; a
trajectory's feasibility criterion aggregates the per-step lower-tail CVaR
values. Expert trajectories push the criterion up, nominal rollouts push it
down through importance weights, and a Beta KL term regularizes toward a
sparse prior. A separate threshold-inference mode learns per-feature
violation budgets for environments whose cost features are observable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .betarisk import BetaParams, RiskLevel, beta_kl_arr, cvar_arr
from .nets import AdamState, BetaHead, Mlp, load_checkpoint, load_mlp, mlp_tensors, save_checkpoint

LOG_FLOOR = math.log(1e-30)
FD_H = 1e-5
OMEGA_LO, OMEGA_HI = 1e-3, 1e3

PER_STEP_BETA = "per-step-beta"
THRESHOLD = "threshold-inference"


@dataclass
class Trajectory:
    """One rollout: per-step arrays of equal length."""

    states: np.ndarray
    actions: np.ndarray
    extrinsic_rewards: np.ndarray
    cost_features: np.ndarray
    task: object = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.extrinsic_rewards = np.asarray(self.extrinsic_rewards, dtype=float).reshape(-1)
        self.cost_features = np.atleast_2d(np.asarray(self.cost_features, dtype=float))
        n = len(self.states)
        if not (len(self.actions) == len(self.extrinsic_rewards)
                == len(self.cost_features) == n) or n == 0:
            raise ValueError("trajectory arrays must share a nonzero length")
        for arr in (self.states, self.actions, self.extrinsic_rewards, self.cost_features):
            if not np.all(np.isfinite(arr)):
                raise ValueError("trajectory contains non-finite entries")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class RiskCriterionValue:
    """Feasibility probability gamma and its complement for one trajectory."""

    gamma: float
    gamma_bar: float
    lam: float
    n_mc: int

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if abs(self.gamma + self.gamma_bar - 1.0) > 1e-12:
            raise ValueError("gamma and gamma_bar must sum to 1")


class ConstraintModel:
    """Learnable feasibility model, either per-step Beta or threshold mode.

    Per-step mode runs an Mlp with a BetaHead over concatenated
    (state, action) rows. Threshold mode keeps one logit per cost feature;
    sigmoid(logit) is the inferred per-episode rate budget.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 256,
                 mode: str = PER_STEP_BETA, aggregation: str = "product",
                 n_features: int = 4, gamma_noise: bool = False,
                 rng: np.random.Generator | None = None):
        if mode not in (PER_STEP_BETA, THRESHOLD):
            raise ValueError(f"unknown constraint mode '{mode}'")
        if aggregation not in ("product", "min"):
            raise ValueError(f"unknown aggregation '{aggregation}'")
        self.mode = mode
        self.aggregation = aggregation
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden = int(hidden)
        self.n_features = int(n_features)
        self.gamma_noise = bool(gamma_noise)
        if mode == PER_STEP_BETA:
            if rng is None:
                rng = np.random.default_rng(0)
            self.net = Mlp(self.state_dim + self.action_dim, self.hidden, 2, rng)
            self.head = BetaHead()
            self.logits = None
        else:
            self.net = None
            self.head = None
            self.logits = np.zeros(self.n_features)

    # -- parameter access -------------------------------------------------

    def params(self) -> list:
        if self.mode == PER_STEP_BETA:
            return self.net.params()
        return [self.logits]

    @property
    def thresholds(self) -> np.ndarray:
        if self.mode != THRESHOLD:
            raise ValueError("thresholds exist only in threshold-inference mode")
        return 1.0 / (1.0 + np.exp(-self.logits))

    def copy(self) -> "ConstraintModel":
        dup = ConstraintModel.__new__(ConstraintModel)
        dup.mode = self.mode
        dup.aggregation = self.aggregation
        dup.state_dim = self.state_dim
        dup.action_dim = self.action_dim
        dup.hidden = self.hidden
        dup.n_features = self.n_features
        dup.gamma_noise = self.gamma_noise
        if self.mode == PER_STEP_BETA:
            dup.net = self.net.copy()
            dup.head = BetaHead(self.head.floor)
            dup.logits = None
        else:
            dup.net = None
            dup.head = None
            dup.logits = self.logits.copy()
        return dup

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": "constraint", "mode": self.mode,
                "aggregation": self.aggregation,
                "state_dim": self.state_dim, "action_dim": self.action_dim,
                "hidden": self.hidden, "n_features": self.n_features}
        if self.mode == PER_STEP_BETA:
            tensors = mlp_tensors(self.net, "phi")
        else:
            tensors = {"logits": self.logits}
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "ConstraintModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "constraint":
            raise ValueError(f"{path}: not a constraint checkpoint")
        model = cls(meta["state_dim"], meta["action_dim"], hidden=meta["hidden"],
                    mode=meta["mode"], aggregation=meta["aggregation"],
                    n_features=meta["n_features"])
        if model.mode == PER_STEP_BETA:
            load_mlp(model.net, tensors, "phi")
        else:
            model.logits = np.asarray(tensors["logits"], dtype=float).copy()
        return model

    # -- evaluation -------------------------------------------------------

    def step_alphas(self, states: np.ndarray, actions: np.ndarray,
                    rng: np.random.Generator | None = None) -> np.ndarray:
        """Beta shape parameters for a batch of steps, shape (T, 2)."""
        if self.mode != PER_STEP_BETA:
            raise ValueError("step_alphas requires per-step-beta mode")
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        raw = self.net.forward(x)
        alphas = self.head.alphas(raw)
        if self.gamma_noise:
            if rng is None:
                raise ValueError("gamma noise needs an rng")
            alphas = np.maximum(rng.gamma(alphas), self.head.floor)
        return alphas


def step_beta(model: ConstraintModel, state, action,
              rng: np.random.Generator | None = None) -> BetaParams:
    a = model.step_alphas(np.asarray(state, dtype=float)[None, :],
                          np.asarray(action, dtype=float)[None, :], rng)
    return BetaParams(float(a[0, 0]), float(a[0, 1]))


def _aggregate_log_gamma(log_cv: np.ndarray, aggregation: str) -> float:
    if aggregation == "min":
        return max(float(log_cv.min()), LOG_FLOOR)
    return max(float(log_cv.sum()), LOG_FLOOR)


def _threshold_terms(model: ConstraintModel, tau: Trajectory) -> np.ndarray:
    rates = tau.cost_features.mean(axis=0)
    if rates.shape[0] != model.n_features:
        raise ValueError(f"expected {model.n_features} cost features, got {rates.shape[0]}")
    return np.maximum(1.0 - np.maximum(0.0, rates - model.thresholds), 1e-12)


def gamma_criterion(model: ConstraintModel, tau: Trajectory, lam: RiskLevel,
                    n_mc: int = 1, rng: np.random.Generator | None = None) -> RiskCriterionValue:
    """Feasibility criterion of one trajectory at risk level lam."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if model.mode == THRESHOLD:
        terms = _threshold_terms(model, tau)
        g = math.exp(max(float(np.log(terms).sum()), LOG_FLOOR))
        return RiskCriterionValue(g, 1.0 - g, lam.lam, n_mc)
    draws = n_mc if model.gamma_noise else 1
    total = 0.0
    for _ in range(draws):
        alphas = model.step_alphas(tau.states, tau.actions, rng)
        cv = cvar_arr(alphas[:, 0], alphas[:, 1], lam.lam)
        total += math.exp(_aggregate_log_gamma(np.log(np.maximum(cv, 1e-300)),
                                               model.aggregation))
    g = min(total / draws, 1.0)
    return RiskCriterionValue(g, 1.0 - g, lam.lam, n_mc)


def importance_weights(model: ConstraintModel, tau: Trajectory,
                       model_prev: ConstraintModel) -> float:
    """Likelihood ratio of tau under the current vs previous model, at lam=1."""
    if model.mode != model_prev.mode:
        raise ValueError("importance weights need models in the same mode")
    lam1 = RiskLevel(1.0)
    g_cur = gamma_criterion(model, tau, lam1).gamma
    g_prev = gamma_criterion(model_prev, tau, lam1).gamma
    return float(np.clip(g_cur / g_prev, OMEGA_LO, OMEGA_HI))


def sample_risk_level(rng: np.random.Generator) -> RiskLevel:
    # reject the extreme lower tail where CVaR inversion degenerates
    lam = float(rng.uniform())
    while lam < 1e-3:
        lam = float(rng.uniform())
    return RiskLevel(lam)


# ---------------------------------------------------------------------------
# constraint update

def _cvar_and_grads(alphas: np.ndarray, lam: float):
    """CVaR per row plus central-difference partials in both shape parameters."""
    a1, a2 = alphas[:, 0], alphas[:, 1]
    cv = cvar_arr(a1, a2, lam)
    d1 = (cvar_arr(a1 + FD_H, a2, lam) - cvar_arr(a1 - FD_H, a2, lam)) / (2.0 * FD_H)
    d2 = (cvar_arr(a1, a2 + FD_H, lam) - cvar_arr(a1, a2 - FD_H, lam)) / (2.0 * FD_H)
    return cv, d1, d2


def _kl_grads(alphas: np.ndarray, prior: BetaParams):
    a1, a2 = alphas[:, 0], alphas[:, 1]
    kl = beta_kl_arr(a1, a2, prior.alpha1, prior.alpha2)
    d1 = (beta_kl_arr(a1 + FD_H, a2, prior.alpha1, prior.alpha2)
          - beta_kl_arr(a1 - FD_H, a2, prior.alpha1, prior.alpha2)) / (2.0 * FD_H)
    d2 = (beta_kl_arr(a1, a2 + FD_H, prior.alpha1, prior.alpha2)
          - beta_kl_arr(a1, a2 - FD_H, prior.alpha1, prior.alpha2)) / (2.0 * FD_H)
    return kl, d1, d2


def _log_gamma_row_grads(cv: np.ndarray, aggregation: str):
    """d log(aggregate) / d cv per row, honoring the floor and aggregation."""
    cv = np.maximum(cv, 1e-300)
    log_cv = np.log(cv)
    grads = np.zeros_like(cv)
    if aggregation == "min":
        i = int(np.argmin(log_cv))
        log_g = log_cv[i]
        if log_g > LOG_FLOOR:
            grads[i] = 1.0 / cv[i]
        return max(log_g, LOG_FLOOR), grads
    log_g = float(log_cv.sum())
    if log_g > LOG_FLOOR:
        grads = 1.0 / cv
    return max(log_g, LOG_FLOOR), grads


def _update_threshold(model, expert_batch, nominal_batch, omegas, lr_C, opt):
    grad = np.zeros_like(model.logits)
    log_e = 0.0
    for tau in expert_batch:
        terms = _threshold_terms(model, tau)
        rates = tau.cost_features.mean(axis=0)
        eps_hat = model.thresholds
        active = rates > eps_hat
        # d log term_i / d logit_i = sig'(l_i) / term_i where the hinge is on
        grad += np.where(active, eps_hat * (1.0 - eps_hat) / terms, 0.0) / len(expert_batch)
        log_e += float(np.log(terms).sum()) / len(expert_batch)
    log_n = 0.0
    for om, tau in zip(omegas, nominal_batch):
        terms = _threshold_terms(model, tau)
        rates = tau.cost_features.mean(axis=0)
        eps_hat = model.thresholds
        active = rates > eps_hat
        grad -= om * np.where(active, eps_hat * (1.0 - eps_hat) / terms, 0.0) / len(nominal_batch)
        log_n += om * float(np.log(terms).sum()) / len(nominal_batch)
    if not np.all(np.isfinite(grad)):
        return {"nan_aborted": True, "loss_expert": log_e, "loss_nominal": log_n,
                "kl": 0.0, "grad_norm": float("nan"), "omegas": list(omegas)}
    if opt is not None:
        opt.step([model.logits], [-grad])
    else:
        model.logits += lr_C * grad
    return {"nan_aborted": False, "loss_expert": log_e, "loss_nominal": log_n,
            "kl": 0.0, "grad_norm": float(np.linalg.norm(grad)), "omegas": list(omegas)}


def constraint_update(model: ConstraintModel, expert_batch: list, nominal_batch: list,
                      lam: RiskLevel, lr_C: float = 1e-2, lr_P: float = 1e-2,
                      prior: BetaParams = BetaParams(0.1, 0.9),
                      model_prev: ConstraintModel | None = None,
                      opt: AdamState | None = None) -> dict:
    """One ascent step on the expert-vs-nominal criterion gap, KL-regularized.

    Maximizes E_expert[log gamma] - E_nominal[omega * log gamma] while
    descending lr_P/lr_C times the mean Beta KL to the prior. Gradients reach
    the network by composing central differences of CVaR and KL in the shape
    parameters with exact backprop. When opt is given it consumes the combined
    gradient (its own lr applies); otherwise plain SGD at lr_C.
    """
    if not expert_batch or not nominal_batch:
        raise ValueError("need nonempty expert and nominal batches")
    # a poisoned model would crash the special functions before the gradient
    # NaN check could fire, so screen the parameters up front
    if not all(np.all(np.isfinite(p)) for p in model.params()):
        return {"nan_aborted": True, "loss_expert": float("nan"),
                "loss_nominal": float("nan"), "kl": float("nan"),
                "grad_norm": float("nan"), "omegas": []}
    if model_prev is None:
        omegas = np.ones(len(nominal_batch))
    else:
        omegas = np.array([importance_weights(model, tau, model_prev)
                           for tau in nominal_batch])
    if model.mode == THRESHOLD:
        return _update_threshold(model, expert_batch, nominal_batch, omegas, lr_C, opt)

    rows = []
    weights = []
    spans = []
    at = 0
    for tau in expert_batch:
        rows.append(np.concatenate([tau.states, tau.actions], axis=1))
        weights.append(1.0 / len(expert_batch))
        spans.append((at, at + len(tau)))
        at += len(tau)
    for om, tau in zip(omegas, nominal_batch):
        rows.append(np.concatenate([tau.states, tau.actions], axis=1))
        weights.append(-float(om) / len(nominal_batch))
        spans.append((at, at + len(tau)))
        at += len(tau)
    x = np.concatenate(rows, axis=0)

    raw = model.net.forward(x)
    alphas = model.head.alphas(raw)
    cv, dc1, dc2 = _cvar_and_grads(alphas, lam.lam)
    kl, dk1, dk2 = _kl_grads(alphas, prior)

    dalpha = np.zeros_like(alphas)
    loss_e = loss_n = 0.0
    for w, (lo, hi) in zip(weights, spans):
        log_g, row_g = _log_gamma_row_grads(cv[lo:hi], model.aggregation)
        dalpha[lo:hi, 0] += w * row_g * dc1[lo:hi]
        dalpha[lo:hi, 1] += w * row_g * dc2[lo:hi]
        if w > 0:
            loss_e += w * log_g
        else:
            loss_n += -w * log_g
    # KL term: mean over every step row of both batches
    ratio = lr_P / lr_C
    dalpha[:, 0] -= ratio * dk1 / len(x)
    dalpha[:, 1] -= ratio * dk2 / len(x)

    draw = model.head.backward(raw, dalpha)
    grads = model.net.backward(draw)
    if not all(np.all(np.isfinite(g)) for g in grads):
        return {"nan_aborted": True, "loss_expert": loss_e, "loss_nominal": loss_n,
                "kl": float(kl.mean()), "grad_norm": float("nan"),
                "omegas": list(omegas)}
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if opt is not None:
        opt.step(model.net.params(), [-g for g in grads])
    else:
        for p, g in zip(model.net.params(), grads):
            p += lr_C * g
    return {"nan_aborted": False, "loss_expert": loss_e, "loss_nominal": loss_n,
            "kl": float(kl.mean()), "grad_norm": gnorm, "omegas": list(omegas)}


def constraint_values(model: ConstraintModel, obs: np.ndarray, action: np.ndarray,
                      lam: RiskLevel) -> np.ndarray:
    """Expected risk gamma_bar of each observation treated as a 1-step trajectory.

    Used by the constraint-map export: rows of obs share one fixed action.
    """
    obs = np.atleast_2d(obs)
    acts = np.broadcast_to(np.asarray(action, dtype=float), (len(obs), model.action_dim))
    alphas = model.step_alphas(obs, acts)
    cv = np.clip(cvar_arr(alphas[:, 0], alphas[:, 1], lam.lam), 1e-30, 1.0)
    return 1.0 - cv
