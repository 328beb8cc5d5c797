"""ADC-aware quantization: weight/activation fake-quant with learned steps and
segmented partial-sum quantization.

Conventions shared with the integer simulator:

* rounding is half away from zero (:func:`cimadapt.config.round_half_away`)
* a partial sum is first formed exactly in the integer domain,
  ``p = sum(Qw * Qa)``, then divided by ``adc_divisor(S_ADC, S_A)``
* a layer output is ``sum_g code_g * (S_W * S_ADC) + bias``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ClipBounds, round_half_away
from .engine import Tensor
from .engine.functional import col2im, im2col

STEP_FLOOR = 1e-8


class QuantError(ValueError):
    pass


@dataclass
class WeightQuantizerState:
    step: float
    bounds: ClipBounds
    frozen: bool = False


@dataclass
class PsumQuantizerState:
    step: float
    bounds: ClipBounds


@dataclass
class ActQuantizerState:
    step: float
    q_max: int


# -- weights -----------------------------------------------------------------


def quantize_weights(w, step: float, bounds: ClipBounds):
    """Return (Qw, W_hat) with Qw = round(clip(W / S_W, -q_n, q_p)) and W_hat = Qw * S_W."""
    step = float(step)
    if not step > 0:
        raise QuantError(f"weight step size must be positive, got {step}")
    qw = round_half_away(np.clip(np.asarray(w, dtype=np.float64) / step, -bounds.q_n, bounds.q_p))
    return qw, qw * step


def lsq_grad_scale(n_elements: int, q_p: int) -> float:
    return 1.0 / np.sqrt(max(n_elements, 1) * max(q_p, 1))


def weight_quant_backward(grad_out, w, step: float, bounds: ClipBounds, grad_scale: float | None = None):
    """STE gradient for W and the learned-step gradient for S_W.

    Inside the clip range the weight gradient passes unchanged and
    dW_hat/dS_W = round(W/S_W) - W/S_W; below/above the range the weight
    gradient is zero and dW_hat/dS_W is -q_n / q_p.
    """
    v = np.asarray(w, dtype=np.float64) / step
    lo, hi = v < -bounds.q_n, v > bounds.q_p
    inside = ~(lo | hi)
    grad_w = np.where(inside, grad_out, 0.0)
    ds = np.where(inside, round_half_away(v) - v, 0.0) + np.where(lo, -bounds.q_n, 0.0) + np.where(hi, bounds.q_p, 0.0)
    g = lsq_grad_scale(v.size, bounds.q_p) if grad_scale is None else grad_scale
    return grad_w, float((grad_out * ds).sum() * g)


def fake_quant_weights(w: Tensor, step: Tensor, bounds: ClipBounds) -> tuple[Tensor, np.ndarray]:
    """Graph node for weight fake-quantization; returns (W_hat, Qw)."""
    s = float(step.data)
    qw, w_hat = quantize_weights(w.data, s, bounds)

    def backward(g):
        gw, gs = weight_quant_backward(g, w.data, s, bounds)
        return gw, np.asarray(gs)

    return Tensor.from_op(w_hat, (w, step), backward), qw


# -- activations (DAC) -------------------------------------------------------


def quantize_activations(x, step: float, q_max: int):
    """Unsigned DAC codes Qa = round(clip(x / S_A, 0, q_max)) and x_hat = Qa * S_A."""
    step = float(step)
    if not step > 0:
        raise QuantError(f"activation step size must be positive, got {step}")
    qa = round_half_away(np.clip(np.asarray(x, dtype=np.float64) / step, 0.0, q_max))
    return qa, qa * step


def fake_quant_activations(x: Tensor, step: Tensor, q_max: int) -> tuple[Tensor, np.ndarray]:
    s = float(step.data)
    qa, x_hat = quantize_activations(x.data, s, q_max)

    def backward(g):
        v = x.data / s
        hi = v > q_max
        inside = (v >= 0) & ~hi
        gx = np.where(inside, g, 0.0)
        ds = np.where(inside, round_half_away(v) - v, 0.0) + np.where(hi, float(q_max), 0.0)
        scale = lsq_grad_scale(v[0].size if v.ndim > 1 else v.size, q_max)
        return gx, np.asarray((g * ds).sum() * scale)

    return Tensor.from_op(x_hat, (x, step), backward), qa


def init_weight_step(w: np.ndarray, q_p: int) -> float:
    """Customary learned-step init, 2*mean|W|/sqrt(q_p)."""
    return max(2.0 * float(np.abs(w).mean()) / np.sqrt(q_p), STEP_FLOOR)


def init_act_step(x: np.ndarray, q_max: int, percentile: float = 99.9) -> float:
    return max(float(np.percentile(np.asarray(x), percentile)) / q_max, STEP_FLOOR)


# -- partial sums (ADC) ------------------------------------------------------


def adc_divisor(adc_step: float, act_step: float) -> float:
    """Integer-domain divisor: a partial sum p of Qw*Qa products yields code round(p / d)."""
    return float(adc_step) / float(act_step)


def output_scale(weight_step: float, adc_step: float) -> float:
    return float(weight_step) * float(adc_step)


def adc_codes(psum, divisor: float, bounds: ClipBounds) -> np.ndarray:
    return round_half_away(np.clip(np.asarray(psum, dtype=np.float64) / divisor, -bounds.q_n, bounds.q_p))


def integer_partial_sums(qa: np.ndarray, qw: np.ndarray, segment_bounds, stride: int, padding: int):
    """Exact per-segment integer partial sums.

    Returns (list of (N, Cout, Ho, Wo) arrays, im2col patches, Ho, Wo).
    Products of small integers summed in float64 are exact well below 2**53.
    """
    n = qa.shape[0]
    cout, _, k, _ = qw.shape
    cols, ho, wo = im2col(qa, k, stride, padding)
    wmat = qw.reshape(cout, -1)
    kk = k * k
    sums = []
    for c0, c1 in segment_bounds:
        p = cols[:, c0 * kk:c1 * kk] @ wmat[:, c0 * kk:c1 * kk].T
        sums.append(p.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return sums, cols, ho, wo


def segmented_conv_forward(x_hat: Tensor, qa: np.ndarray, w_hat: Tensor, qw: np.ndarray, segment_bounds,
                           act_step: float, weight_step: float, psum: PsumQuantizerState,
                           stride: int = 1, padding: int = 0, capture: dict | None = None) -> Tensor:
    """Segmented convolution with ADC quantization of every partial sum.

    Forward: ``sum_g round(clip(p_g / d)) * S_W * S_ADC`` with ``p_g`` the
    integer partial sum of segment g and ``d = S_ADC / S_A``.  Backward treats
    each quantizer as identity inside its clip range (zero where the partial
    sum clipped) and ignores the scale factors, i.e. gradients are those of
    ``sum_g mask_g * conv(x_hat_g, W_hat_g)``.
    """
    if qa.shape[1] != qw.shape[1] or segment_bounds[-1][1] != qw.shape[1]:
        raise QuantError(
            f"segmentation covers {segment_bounds[-1][1]} channels but weight has {qw.shape[1]} "
            f"and input has {qa.shape[1]}"
        )
    d = adc_divisor(psum.step, act_step)
    sums, cols, ho, wo = integer_partial_sums(qa, qw, segment_bounds, stride, padding)
    codes = [adc_codes(p, d, psum.bounds) for p in sums]
    total = codes[0].copy()
    for c in codes[1:]:
        total += c
    out = total * output_scale(weight_step, psum.step)
    if capture is not None:
        capture["codes"] = codes
        capture["psums"] = sums
    x_shape = x_hat.shape
    k = w_hat.shape[2]

    def backward(g):
        return psum_quant_backward(g, x_shape, cols, act_step, w_hat.data, sums, d, psum.bounds,
                                   segment_bounds, k, stride, padding, ho, wo)

    return Tensor.from_op(out, (x_hat, w_hat), backward)


def saturated(v: np.ndarray, bounds: ClipBounds) -> np.ndarray:
    """Scaled partial sums whose unclipped code would fall outside the ADC range."""
    r = round_half_away(v)
    return (r < -bounds.q_n) | (r > bounds.q_p)


def clip_mask(psum: np.ndarray, divisor: float, bounds: ClipBounds) -> np.ndarray:
    v = psum / divisor
    return (v >= -bounds.q_n) & (v <= bounds.q_p)


def psum_quant_backward(grad_out, x_shape, qa_cols, act_step, w_hat, psums, divisor, bounds,
                        segment_bounds, k, stride, padding, ho, wo):
    """Gradients (to x_hat, to W_hat) of the partial-sum quantized conv under STE."""
    cout = w_hat.shape[0]
    kk = k * k
    wmat = w_hat.reshape(cout, -1)
    xcols = qa_cols * act_step
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = np.zeros_like(wmat)
    gcols = np.zeros_like(xcols)
    for (c0, c1), p in zip(segment_bounds, psums):
        m = clip_mask(p, divisor, bounds).transpose(0, 2, 3, 1).reshape(-1, cout)
        gm = gmat * m
        sl = slice(c0 * kk, c1 * kk)
        gw[:, sl] = gm.T @ xcols[:, sl]
        gcols[:, sl] = gm @ wmat[:, sl]
    gx = col2im(gcols, x_shape, k, stride, padding, ho, wo)
    return gx, gw.reshape(w_hat.shape)
