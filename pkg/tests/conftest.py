import numpy as np
import pytest

from twfepanel.families import ModelFamily
from twfepanel.panel import PanelData, RegressorMeta


def random_panel(family, n_units=4, n_periods=4, n_regressors=1, seed=0,
                 beta=None, dynamic=False, effect_sd=0.3):
    """Small synthetic panel drawn from the family's own model."""
    rng = np.random.default_rng(seed)
    N, T, K = n_units, n_periods, n_regressors
    alpha = rng.normal(0, effect_sd, N)
    gamma = rng.normal(0, effect_sd, T)
    x = rng.normal(0, 1, (N, T, K))
    meta = [RegressorMeta(name=f"x{k+1}") for k in range(K)]
    if beta is None:
        beta = np.full(K, 0.8)
    if dynamic:
        meta[0] = RegressorMeta(name="x1", exogeneity="predetermined",
                                kind="lagged-outcome")
    idx = x @ np.asarray(beta)[:K] + alpha[:, None] + gamma[None, :]
    kind = family.kind
    if kind == "logit":
        y = (rng.logistic(size=(N, T)) < idx).astype(int)
    elif kind == "probit":
        y = (rng.normal(size=(N, T)) < idx).astype(int)
    elif kind == "poisson":
        y = rng.poisson(np.exp(np.clip(idx, -20, 3)))
    elif kind == "ordered-logit":
        cuts = np.concatenate(([family.tau1], np.asarray(beta)[K:]))
        lat = idx + rng.logistic(size=(N, T))
        y = np.ones((N, T), dtype=int)
        for c in cuts:
            y += (lat > c).astype(int)
    else:
        raise ValueError(kind)
    if dynamic:
        # overwrite the first regressor with the lagged outcome and resimulate
        ylag = np.zeros((N, T))
        y = np.zeros((N, T), dtype=int)
        prev = rng.integers(0, 2, N).astype(float)
        for t in range(T):
            ylag[:, t] = prev
            eta = (np.asarray(beta)[0] * prev + x[:, t, 1:] @ np.asarray(beta)[1:K]
                   + alpha + gamma[t])
            if kind == "logit":
                y[:, t] = (rng.logistic(size=N) < eta).astype(int)
            elif kind == "poisson":
                y[:, t] = np.minimum(rng.poisson(np.exp(np.clip(eta, -20, 2.0))), 8)
            else:
                raise ValueError("dynamic test panels support logit/poisson")
            prev = y[:, t].astype(float)
        x = x.copy()
        x[:, :, 0] = ylag
        if kind == "poisson":
            # a lagged count is predetermined but not the 0/1 shifted outcome;
            # keep the metadata honest
            meta[0] = RegressorMeta(name="x1", exogeneity="predetermined",
                                    kind="continuous")
        else:
            x[:, 1:, 0] = y[:, :-1]
            x[:, 0, 0] = ylag[:, 0]
    data = PanelData(outcomes=y, regressors=x, regressor_meta=meta)
    return data


def random_mnl_panel(n_units=4, n_periods=4, seed=0, dynamic=False, J=3,
                     beta=None, effect_sd=0.3):
    """Multinomial panel drawn from its own model (optionally lag-dependent)."""
    rng = np.random.default_rng(seed)
    N, T, d = n_units, n_periods, J - 1
    alpha = rng.normal(0, effect_sd, (N, d))
    gamma = rng.normal(0, effect_sd, (T, d))
    z = rng.normal(0, 1, (N, T))
    if beta is None:
        beta = np.tile([0.5, 1.0] if dynamic else [1.0], d)
    beta = np.asarray(beta, dtype=float)
    K = 2 if dynamic else 1
    slopes = beta.reshape(d, K)
    y = np.zeros((N, T), dtype=int)
    x = np.zeros((N, T, K))
    prev = rng.integers(1, J + 1, N)
    for t in range(T):
        if dynamic:
            x[:, t, 0] = (prev == 1).astype(float)
            x[:, t, 1] = z[:, t]
        else:
            x[:, t, 0] = z[:, t]
        V = x[:, t] @ slopes.T + alpha + gamma[t]
        ex = np.exp(V - V.max(axis=1, keepdims=True))
        denom = np.exp(-V.max(axis=1)) + ex.sum(axis=1)
        probs = np.concatenate(
            [np.exp(-V.max(axis=1))[:, None], ex], axis=1
        ) / denom[:, None]
        u = rng.random(N)
        y[:, t] = 1 + (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)
        prev = y[:, t]
    meta = [RegressorMeta(name="ylag1", exogeneity="predetermined", kind="binary"),
            RegressorMeta(name="z")] if dynamic else [RegressorMeta(name="z")]
    return PanelData(outcomes=y, regressors=x, regressor_meta=meta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
