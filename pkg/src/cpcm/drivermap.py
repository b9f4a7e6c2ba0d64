"""Driver-to-return maps and their mean Jacobians.

``fit_linear_map`` is ridge regression. ``fit_neural_map`` trains a small tanh
MLP with a Huber loss and, optionally, a penalty on the variation of the
network Jacobian between nearest-neighbour samples. Gradients of both the fit
loss and the Jacobian penalty are propagated by hand through the fixed
architecture (forward tangents for the Jacobian, then reverse mode through
primal and tangent passes).

Inputs and outputs are standardized inside the fit; reported Jacobians are
mapped back to the caller's units.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

SCHEMA = "cpcm.drivermap"
SCHEMA_VERSION = 1


@dataclass
class MLP:
    """Tanh network ``x -> W_o h_L + b_o`` with ``h_l = tanh(W_l h_{l-1} + b_l)``."""

    weights: list[np.ndarray]  # hidden layers then output; W has shape (out, in)
    biases: list[np.ndarray]

    @classmethod
    def init(cls, n_in: int, hidden: tuple[int, ...], n_out: int, rng: np.random.Generator) -> "MLP":
        sizes = [n_in, *hidden, n_out]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / np.sqrt(a)
            if k == len(sizes) - 2 and hidden:
                scale *= 0.5
            weights.append(rng.standard_normal((b, a)) * scale)
            biases.append(np.zeros(b))
        return cls(weights, biases)

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _hidden(self, x: np.ndarray) -> list[np.ndarray]:
        hs = [x]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            hs.append(np.tanh(hs[-1] @ W.T + b))
        return hs

    def forward(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._hidden(x)[-1] @ self.weights[-1].T + self.biases[-1]

    def _tangents(self, hs: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-sample ``U_l = W_l T_{l-1}`` and ``T_l = diag(1 - h_l^2) U_l``."""
        us, ts = [], []
        for layer in range(1, self.depth + 1):
            W = self.weights[layer - 1]
            s = 1.0 - hs[layer] ** 2
            u = np.broadcast_to(W, (hs[0].shape[0],) + W.shape) if layer == 1 else W @ ts[-1]
            us.append(u)
            ts.append(s[:, :, None] * u)
        return us, ts

    def jacobian(self, x) -> np.ndarray:
        """Per-sample Jacobians, shape ``(T, n_out, n_in)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.depth == 0:
            return np.broadcast_to(self.weights[0], (x.shape[0],) + self.weights[0].shape).copy()
        _, ts = self._tangents(self._hidden(x))
        return self.weights[-1] @ ts[-1]

    def loss_and_grad(
        self,
        x: np.ndarray,
        y: np.ndarray,
        huber_delta: float,
        smooth_weight: float = 0.0,
        pairs: np.ndarray | None = None,
    ) -> tuple[float, list[np.ndarray]]:
        """Mean Huber loss plus ``smooth_weight`` times the mean squared Jacobian gap over ``pairs``."""
        t, n = y.shape
        hs = self._hidden(x)
        out = hs[-1] @ self.weights[-1].T + self.biases[-1]
        resid = out - y
        absr = np.abs(resid)
        quad = absr <= huber_delta
        loss = np.where(quad, 0.5 * resid**2, huber_delta * (absr - 0.5 * huber_delta)).mean()
        g_out = np.clip(resid, -huber_delta, huber_delta) / (t * n)

        L = self.depth
        gW = [np.zeros_like(W) for W in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        gW[-1] += g_out.T @ hs[-1]
        gb[-1] += g_out.sum(axis=0)
        gh = g_out @ self.weights[-1]

        use_penalty = smooth_weight > 0 and pairs is not None and len(pairs) > 0 and L > 0
        if use_penalty:
            us, ts = self._tangents(hs)
            jac = self.weights[-1] @ ts[-1]
            a, b = pairs[:, 0], pairs[:, 1]
            gap = jac[a] - jac[b]
            loss += smooth_weight * np.mean(np.sum(gap**2, axis=(1, 2)))
            scaled = (2.0 * smooth_weight / len(pairs)) * gap.reshape(len(pairs), -1)
            incidence = np.zeros((t, len(pairs)))
            cols = np.arange(len(pairs))
            np.add.at(incidence, (a, cols), 1.0)
            np.add.at(incidence, (b, cols), -1.0)
            g_jac = (incidence @ scaled).reshape(jac.shape)
            gW[-1] += np.tensordot(g_jac, ts[-1], axes=([0, 2], [0, 2]))
            g_tan = self.weights[-1].T @ g_jac

        for layer in range(L, 0, -1):
            W = self.weights[layer - 1]
            h = hs[layer]
            s = 1.0 - h**2
            if use_penalty:
                u = us[layer - 1]
                gh = gh + np.sum(g_tan * u, axis=2) * (-2.0 * h)
                g_u = g_tan * s[:, :, None]
                if layer > 1:
                    gW[layer - 1] += np.tensordot(g_u, ts[layer - 2], axes=([0, 2], [0, 2]))
                    g_tan = W.T @ g_u
                else:
                    gW[0] += g_u.sum(axis=0)
            gz = gh * s
            gW[layer - 1] += gz.T @ hs[layer - 1]
            gb[layer - 1] += gz.sum(axis=0)
            gh = gz @ W
        return float(loss), [*gW, *gb]


@dataclass(frozen=True)
class NeuralMapSpec:
    hidden: tuple[int, ...] | None = None  # None: one layer of width ~ T/50
    activation: str = "tanh"
    epochs: int = 400
    learning_rate: float = 0.05
    momentum: float = 0.9
    huber_delta: float = 1.345
    smooth_weight: float = 0.0
    seed: int = 0
    val_fraction: float = 0.2
    patience: int = 5  # validation checks without progress before stopping
    check_every: int = 10

    def __post_init__(self):
        if self.activation != "tanh":
            raise ConfigError("only the tanh activation is supported")
        if self.hidden is not None and (len(self.hidden) > 2 or any(w < 1 for w in self.hidden)):
            raise ConfigError("hidden must list at most two positive widths")
        if self.epochs < 0 or self.learning_rate <= 0 or self.huber_delta <= 0 or self.smooth_weight < 0:
            raise ConfigError("epochs >= 0, learning_rate > 0, huber_delta > 0, smooth_weight >= 0 required")
        if not 0 <= self.momentum < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("momentum and val_fraction must lie in [0, 1)")


def default_hidden(window: int) -> tuple[int, ...]:
    return (int(np.clip(round(window / 50), 2, 64)),)


@dataclass
class JacobianMap:
    B: np.ndarray  # n x m mean Jacobian
    variant: str  # linear | mlp | pinn
    fit_loss: float
    window: tuple[int, int]
    intercept: np.ndarray | None = None
    net: MLP | None = None
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_scale: np.ndarray | None = None
    history: list[float] = field(default_factory=list)

    def predict(self, drivers) -> np.ndarray:
        x = np.atleast_2d(np.asarray(drivers, dtype=float))
        if self.net is None:
            return x @ self.B.T + self.intercept
        z = (x - self.x_mean) / self.x_scale
        return self.y_mean + self.y_scale * self.net.forward(z)

    def jacobians(self, drivers) -> np.ndarray:
        x = np.atleast_2d(np.asarray(drivers, dtype=float))
        if self.net is None:
            return np.broadcast_to(self.B, (x.shape[0],) + self.B.shape).copy()
        z = (x - self.x_mean) / self.x_scale
        return self.y_scale[None, :, None] * self.net.jacobian(z) / self.x_scale[None, None, :]

    def to_dict(self) -> dict:
        record = {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "variant": self.variant,
            "fitLoss": self.fit_loss,
            "window": list(self.window),
            "B": self.B.tolist(),
        }
        if self.net is None:
            record["intercept"] = self.intercept.tolist()
        else:
            record.update(
                xMean=self.x_mean.tolist(),
                xScale=self.x_scale.tolist(),
                yMean=self.y_mean.tolist(),
                yScale=self.y_scale.tolist(),
                layers=[{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.net.weights, self.net.biases)],
            )
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, record: dict) -> "JacobianMap":
        if record.get("schema") != SCHEMA or record.get("version") != SCHEMA_VERSION:
            raise DataError(f"unsupported map record {record.get('schema')!r} v{record.get('version')}")
        common = dict(
            B=np.asarray(record["B"], float),
            variant=record["variant"],
            fit_loss=float(record["fitLoss"]),
            window=tuple(record["window"]),
        )
        if "layers" not in record:
            return cls(intercept=np.asarray(record["intercept"], float), **common)
        net = MLP(
            [np.asarray(layer["W"], float) for layer in record["layers"]],
            [np.asarray(layer["b"], float) for layer in record["layers"]],
        )
        return cls(
            net=net,
            x_mean=np.asarray(record["xMean"], float),
            x_scale=np.asarray(record["xScale"], float),
            y_mean=np.asarray(record["yMean"], float),
            y_scale=np.asarray(record["yScale"], float),
            **common,
        )

    @classmethod
    def from_json(cls, text: str) -> "JacobianMap":
        return cls.from_dict(json.loads(text))


def _xy(drivers, returns) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(drivers, dtype=float)
    y = np.asarray(getattr(returns, "returns", returns), dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    y = y[:, None] if y.ndim == 1 else y
    if x.shape[0] != y.shape[0]:
        raise DataError("drivers and returns must have the same number of rows")
    return x, y


def fit_linear_map(drivers, returns, ridge: float = 0.0, window: tuple[int, int] | None = None) -> JacobianMap:
    """Ridge regression with intercept: ``(Xc'Xc + ridge I) B' = Xc'Yc`` on centered data."""
    x, y = _xy(drivers, returns)
    t, m = x.shape
    if t <= m:
        raise DataError(f"need more rows ({t}) than drivers ({m})")
    if ridge < 0:
        raise ConfigError("ridge must be non-negative")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + ridge * np.eye(m)
    if ridge == 0 and np.linalg.cond(gram) > 1e12:
        raise NumericalError("singular normal equations at ridge=0; increase the ridge")
    B = np.linalg.solve(gram, xc.T @ yc).T
    intercept = ym - B @ xm
    loss = float(np.mean((yc - xc @ B.T) ** 2))
    return JacobianMap(B, "linear", loss, window or (0, t), intercept=intercept)


def _scale(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    sd = a.std(axis=0)
    return mean, np.where(sd > 0, sd, 1.0)


def neighbour_pairs(x: np.ndarray) -> np.ndarray:
    """Each sample paired with its nearest other sample (by Euclidean distance)."""
    if x.shape[0] < 2:
        return np.empty((0, 2), dtype=int)
    _, idx = cKDTree(x).query(x, k=2)
    return np.column_stack([np.arange(x.shape[0]), idx[:, 1]])


def fit_neural_map(
    drivers, returns, spec: NeuralMapSpec = NeuralMapSpec(), window: tuple[int, int] | None = None
) -> JacobianMap:
    """Train the MLP by full-batch gradient descent with momentum.

    The last ``val_fraction`` of the rows is held out. Every ``check_every``
    epochs the validation loss and the martingale defect of the validation
    fitted equal-weight portfolio are evaluated; training stops once neither
    has improved for ``patience`` consecutive checks.
    """
    from .diag import martingale_defect  # local import keeps module load order simple

    x, y = _xy(drivers, returns)
    t, m = x.shape
    if t <= 10 * m:
        raise DataError(f"capacity guard: need T > 10 m (T={t}, m={m})")
    hidden = default_hidden(t) if spec.hidden is None else tuple(spec.hidden)
    x_mean, x_scale = _scale(x)
    y_mean, y_scale = _scale(y)
    zx, zy = (x - x_mean) / x_scale, (y - y_mean) / y_scale

    n_val = int(t * spec.val_fraction)
    if n_val < 20:
        n_val = 0
    tr_x, tr_y = zx[: t - n_val], zy[: t - n_val]
    va_x, va_y = zx[t - n_val :], zy[t - n_val :]
    pairs = neighbour_pairs(tr_x) if spec.smooth_weight > 0 else None

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(spec.seed), 7])))
    net = MLP.init(m, hidden, y.shape[1], rng)
    velocity = [np.zeros_like(p) for p in net.params()]
    history: list[float] = []
    best_val, best_defect, stale = np.inf, np.inf, 0
    loss = float("nan")
    for epoch in range(spec.epochs):
        loss, grads = net.loss_and_grad(tr_x, tr_y, spec.huber_delta, spec.smooth_weight, pairs)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            last = history[-1] if history else float("nan")
            raise NumericalError(f"neural map diverged at epoch {epoch} (last finite loss {last:.4g})")
        history.append(loss)
        for p, v, g in zip(net.params(), velocity, grads):
            v *= spec.momentum
            v -= spec.learning_rate * g
            p += v
        if n_val and (epoch + 1) % spec.check_every == 0:
            val_loss, _ = net.loss_and_grad(va_x, va_y, spec.huber_delta)
            path = np.cumsum(net.forward(va_x).mean(axis=1))
            defect = martingale_defect(path, window=max(10, n_val // 3)).value
            improved = val_loss < best_val * (1 - 1e-4) or defect < best_defect * (1 - 1e-4)
            best_val, best_defect = min(best_val, val_loss), min(best_defect, defect)
            stale = 0 if improved else stale + 1
            if stale >= spec.patience:
                logger.debug("early stop at epoch %d", epoch + 1)
                break
    if spec.epochs == 0:
        loss, _ = net.loss_and_grad(tr_x, tr_y, spec.huber_delta, spec.smooth_weight, pairs)

    variant = "pinn" if spec.smooth_weight > 0 else "mlp"
    fitted = JacobianMap(
        np.zeros((y.shape[1], m)),
        variant,
        float(loss),
        window or (0, t),
        net=net,
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=y_mean,
        y_scale=y_scale,
        history=history,
    )
    fitted.B = mean_jacobian(fitted, x)
    return fitted


def mean_jacobian(fitted: JacobianMap, drivers) -> np.ndarray:
    """Average of the per-sample Jacobians over ``drivers`` (exactly ``B`` for a linear map)."""
    x = np.asarray(drivers, dtype=float)
    if x.size == 0 or x.shape[0] == 0:
        raise DataError("mean_jacobian over an empty window")
    if fitted.net is None:
        return fitted.B.copy()
    return fitted.jacobians(x).mean(axis=0)
