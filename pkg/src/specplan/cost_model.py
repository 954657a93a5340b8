"""Analytical verification-latency model with offline and online correction.

The predictor is a roofline: latency is the max of compute time (FLOP count
over peak throughput) and memory time (byte traffic over bandwidth) for one
verification pass of ``s`` new tokens against a cached context of length
``c``.  FLOP and byte counts follow the standard dense-transformer breakdown
(attention and FFN matmuls plus the LM head; elementwise work is omitted as
lower-order).  Three estimator variants correct the raw roofline: an offline
linear fit ("static"), an online multiplicative bias tracked by EMA ("ema"),
and their composition ("ema_calib").
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

VARIANTS = ("static", "ema", "ema_calib")

_INT_PARAM_KEYS = ("L", "h", "n_q", "n_kv", "d", "h_ffn", "V", "bp")
_FLOAT_PARAM_KEYS = ("peak_flops", "bandwidth")


@dataclass(frozen=True)
class CostModelParams:
    """Transformer dimensions plus hardware peaks.

    ``h_q`` and ``h_kv`` are always derived from head counts and head size.
    """

    L: int
    h: int
    n_q: int
    n_kv: int
    d: int
    h_ffn: int
    V: int
    bp: int
    peak_flops: float
    bandwidth: float

    def __post_init__(self) -> None:
        for key in _INT_PARAM_KEYS:
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be a positive integer")
        if self.peak_flops <= 0.0 or self.bandwidth <= 0.0:
            raise ValueError("peak_flops and bandwidth must be > 0")

    @property
    def h_q(self) -> int:
        return self.n_q * self.d

    @property
    def h_kv(self) -> int:
        return self.n_kv * self.d


@dataclass(frozen=True)
class LatencyQuery:
    """One verification pass: ``s`` newly verified tokens over ``c`` cached tokens."""

    s: int
    c: int

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError(f"s must be >= 1, got {self.s}")
        if self.c < 0:
            raise ValueError(f"c must be >= 0, got {self.c}")


@dataclass(frozen=True)
class CycleLatencies:
    """Fixed per-cycle time components (seconds)."""

    t_draft: float
    t_aux: float
    l_ar: float

    def __post_init__(self) -> None:
        if self.t_draft < 0.0 or self.t_aux < 0.0:
            raise ValueError("t_draft and t_aux must be >= 0")
        if self.l_ar <= 0.0:
            raise ValueError("l_ar must be > 0")


@dataclass(frozen=True)
class CalibrationFit:
    """Offline least-squares map from predicted to observed latency."""

    slope: float
    intercept: float
    rmse_before: float
    rmse_after: float


@dataclass(frozen=True)
class EmaBias:
    """Multiplicative correction tracked online; starts at 1."""

    ratio_bias: float = 1.0
    alpha: float = 0.1

    def __post_init__(self) -> None:
        if self.ratio_bias <= 0.0:
            raise ValueError("ratio_bias must stay > 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


def query_for_budget(budget: int, context_len: int) -> LatencyQuery:
    """Tree budget to verified-token count: N draft nodes plus the root/bonus token."""
    return LatencyQuery(s=budget + 1, c=context_len)


def flops(params: CostModelParams, q: LatencyQuery) -> int:
    """Verifier FLOPs: attention and FFN matmuls per layer plus the LM head."""
    s, c = q.s, q.c
    h, h_q, h_kv, h_ffn = params.h, params.h_q, params.h_kv, params.h_ffn
    per_layer = 4 * s * h * h_q + 4 * s * h * h_kv + 4 * s * (c + s) * h_q + 6 * s * h * h_ffn
    return params.L * per_layer + 2 * s * h * params.V


def weights_bytes(params: CostModelParams, q: LatencyQuery) -> int:
    """Weight traffic: attention and FFN matrices per layer, embedding + LM head once."""
    h, h_q, h_kv, h_ffn = params.h, params.h_q, params.h_kv, params.h_ffn
    return params.bp * (params.L * (2 * h * h_q + 2 * h * h_kv + 3 * h * h_ffn) + 2 * params.V * h)


def kv_cache_bytes(params: CostModelParams, q: LatencyQuery) -> int:
    """KV-cache traffic: read the past context, write the new tokens, per layer."""
    return params.bp * params.L * (2 * q.c * params.h_kv + 2 * q.s * params.h_kv)


def activation_bytes(params: CostModelParams, q: LatencyQuery) -> int:
    """Intermediate-activation traffic for attention, FFN, and the LM head."""
    s, c = q.s, q.c
    h, h_q, h_kv, h_ffn = params.h, params.h_q, params.h_kv, params.h_ffn
    per_layer = 4 * s * h + 4 * s * h_q + 2 * s * h_kv + 4 * s * h_ffn + 2 * params.n_q * s * (c + s)
    return params.bp * (params.L * per_layer + s * h + s * params.V)


def bytes_moved(params: CostModelParams, q: LatencyQuery) -> int:
    """Total memory traffic (closed form; equals the three category terms summed)."""
    s, c = q.s, q.c
    h, h_q, h_kv, h_ffn = params.h, params.h_q, params.h_kv, params.h_ffn
    per_layer = (
        2 * h * (h_q + h_kv)
        + 3 * h * h_ffn
        + 2 * h_kv * (c + 2 * s)
        + 4 * s * (h + h_q + h_ffn)
        + 2 * params.n_q * s * (c + s)
    )
    return params.bp * (2 * params.V * h + s * (h + params.V) + params.L * per_layer)


def roofline_latency(params: CostModelParams, q: LatencyQuery) -> float:
    """Seconds for one verification pass: max of compute time and memory time."""
    return max(flops(params, q) / params.peak_flops, bytes_moved(params, q) / params.bandwidth)


def fit_static_calibration(pairs: list[tuple[float, float]]) -> CalibrationFit:
    """Least-squares line observed ~ slope * predicted + intercept.

    ``rmse_before`` scores the raw predictions, ``rmse_after`` the fitted line,
    both on the fitting pairs themselves (so after <= before always).
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 (predicted, observed) pairs")
    pred = np.array([p for p, _ in pairs], dtype=np.float64)
    obs = np.array([o for _, o in pairs], dtype=np.float64)
    var = float(np.var(pred))
    if var == 0.0:
        raise ValueError("all predicted values are equal; fit is underdetermined")
    slope = float(np.cov(pred, obs, bias=True)[0, 1] / var)
    intercept = float(obs.mean() - slope * pred.mean())
    rmse_before = float(np.sqrt(np.mean((obs - pred) ** 2)))
    rmse_after = float(np.sqrt(np.mean((obs - (slope * pred + intercept)) ** 2)))
    return CalibrationFit(slope=slope, intercept=intercept, rmse_before=rmse_before, rmse_after=rmse_after)


def ema_update(bias: EmaBias, predicted: float, observed: float) -> EmaBias:
    """One EMA step on the observed/predicted ratio; returns a new bias object."""
    if predicted <= 0.0 or observed <= 0.0:
        raise ValueError("predicted and observed must be > 0")
    new_ratio = (1.0 - bias.alpha) * bias.ratio_bias + bias.alpha * (observed / predicted)
    return EmaBias(ratio_bias=new_ratio, alpha=bias.alpha)


def estimate_verify_latency(
    variant: str,
    params: CostModelParams,
    q: LatencyQuery,
    fit: CalibrationFit | None = None,
    bias: EmaBias | None = None,
) -> float:
    """Corrected verification-latency estimate under the chosen variant.

    static: slope * roofline + intercept.  ema: ratio_bias * roofline.
    ema_calib: ratio_bias * (slope * roofline + intercept).
    """
    raw = roofline_latency(params, q)
    return _apply_variant(variant, raw, fit, bias)


def _apply_variant(
    variant: str, raw: float, fit: CalibrationFit | None, bias: EmaBias | None
) -> float:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant in ("static", "ema_calib"):
        if fit is None:
            raise ValueError(f"variant {variant!r} requires a calibration fit")
        if fit.slope <= 0.0:
            raise ValueError(f"calibration slope must be > 0, got {fit.slope}")
        raw = fit.slope * raw + fit.intercept
    if variant in ("ema", "ema_calib"):
        if bias is None:
            raise ValueError(f"variant {variant!r} requires an EMA bias")
        raw = bias.ratio_bias * raw
    return raw


IDENTITY_FIT = CalibrationFit(slope=1.0, intercept=0.0, rmse_before=0.0, rmse_after=0.0)


class VerifyLatencyEstimator:
    """Bundles params, variant, and corrections behind one latency query surface.

    ``curve(c)`` precomputes the quadratic FLOP/byte coefficients for a fixed
    context so per-budget evaluation inside the controller loop is a handful
    of flops; it returns exactly what :func:`estimate_verify_latency` would.
    """

    def __init__(
        self,
        params: CostModelParams,
        variant: str = "static",
        fit: CalibrationFit | None = None,
        bias: EmaBias | None = None,
    ) -> None:
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if variant == "static" and fit is None:
            fit = IDENTITY_FIT
        if variant in ("static", "ema_calib") and (fit is None or fit.slope <= 0.0):
            raise ValueError("static and ema_calib variants need a fit with slope > 0")
        if variant in ("ema", "ema_calib") and bias is None:
            bias = EmaBias()
        self.params = params
        self.variant = variant
        self.fit = fit
        self.bias = bias

    def estimate(self, s: int, c: int) -> float:
        return estimate_verify_latency(
            self.variant, self.params, LatencyQuery(s=s, c=c), fit=self.fit, bias=self.bias
        )

    def estimate_for_budget(self, budget: int, context_len: int) -> float:
        q = query_for_budget(budget, context_len)
        return estimate_verify_latency(self.variant, self.params, q, fit=self.fit, bias=self.bias)

    def observe(self, s: int, c: int, observed: float) -> None:
        """Feed one observed latency into the EMA variants; no-op for static."""
        if self.variant in ("ema", "ema_calib") and self.bias is not None:
            predicted = self._pre_bias(s, c)
            self.bias = ema_update(self.bias, predicted, observed)

    def curve(self, c: int) -> "LatencyCurve":
        return LatencyCurve(self, c)

    def _pre_bias(self, s: int, c: int) -> float:
        """Prediction before the EMA factor (the quantity whose ratio is tracked)."""
        raw = roofline_latency(self.params, LatencyQuery(s=s, c=c))
        if self.variant == "ema_calib":
            assert self.fit is not None
            return self.fit.slope * raw + self.fit.intercept
        return raw


class LatencyCurve:
    """Latency as a function of ``s`` at fixed context, via precomputed coefficients."""

    def __init__(self, estimator: VerifyLatencyEstimator, c: int) -> None:
        p = estimator.params
        h, h_q, h_kv, h_ffn = p.h, p.h_q, p.h_kv, p.h_ffn
        self._flops_lin = p.L * (4 * h * h_q + 4 * h * h_kv + 4 * c * h_q + 6 * h * h_ffn) + 2 * h * p.V
        self._flops_quad = 4 * p.L * h_q
        self._bytes_const = p.bp * (2 * p.V * h + p.L * (2 * h * (h_q + h_kv) + 3 * h * h_ffn + 2 * h_kv * c))
        self._bytes_lin = p.bp * (h + p.V + p.L * (4 * h_kv + 4 * (h + h_q + h_ffn) + 2 * p.n_q * c))
        self._bytes_quad = p.bp * p.L * 2 * p.n_q
        self._inv_peak = 1.0 / p.peak_flops
        self._inv_bw = 1.0 / p.bandwidth
        self._slope, self._intercept, self._ratio = 1.0, 0.0, 1.0
        if estimator.variant in ("static", "ema_calib"):
            assert estimator.fit is not None
            self._slope, self._intercept = estimator.fit.slope, estimator.fit.intercept
        if estimator.variant in ("ema", "ema_calib"):
            assert estimator.bias is not None
            self._ratio = estimator.bias.ratio_bias

    def latency(self, s: int) -> float:
        compute = (self._flops_lin + self._flops_quad * s) * s * self._inv_peak
        memory = (self._bytes_const + (self._bytes_lin + self._bytes_quad * s) * s) * self._inv_bw
        raw = compute if compute > memory else memory
        return self._ratio * (self._slope * raw + self._intercept)


def params_to_text(params: CostModelParams) -> str:
    lines = [f"{key} = {getattr(params, key)}" for key in _INT_PARAM_KEYS]
    lines += [f"{key} = {getattr(params, key)!r}" for key in _FLOAT_PARAM_KEYS]
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> CostModelParams:
    """Parse a flat ``key = value`` profile; all ten keys are required."""
    values: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed profile line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ValueError(f"duplicate profile key {key!r}")
        values[key] = value
    missing = [k for k in _INT_PARAM_KEYS + _FLOAT_PARAM_KEYS if k not in values]
    if missing:
        raise ValueError(f"profile is missing keys: {', '.join(missing)}")
    unknown = set(values) - set(_INT_PARAM_KEYS + _FLOAT_PARAM_KEYS)
    if unknown:
        raise ValueError(f"unknown profile keys: {', '.join(sorted(unknown))}")
    kwargs: dict[str, int | float] = {k: int(values[k]) for k in _INT_PARAM_KEYS}
    kwargs.update({k: float(values[k]) for k in _FLOAT_PARAM_KEYS})
    return CostModelParams(**kwargs)  # type: ignore[arg-type]


def load_params(path: str | Path) -> CostModelParams:
    return params_from_text(Path(path).read_text())


def load_trace(path: str | Path) -> list[tuple[int, int, float]]:
    """Read latency observations as ``s,c,observed_seconds`` rows (header optional)."""
    rows: list[tuple[int, int, float]] = []
    for i, raw in enumerate(Path(path).read_text().splitlines()):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"trace line {i + 1} must have 3 fields, got {raw!r}")
        if i == 0 and not _is_number(parts[0]):
            continue  # header
        rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if not rows:
        raise ValueError("trace file contains no observations")
    return rows


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def trace_predictions(
    params: CostModelParams, rows: list[tuple[int, int, float]]
) -> list[tuple[float, float]]:
    """Recompute roofline predictions for trace rows, pairing them with observations."""
    return [(roofline_latency(params, LatencyQuery(s=s, c=c)), obs) for s, c, obs in rows]
