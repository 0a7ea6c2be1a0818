"""Neural building blocks with explicit forward and backward passes.

Everything here operates on plain float32 numpy arrays (the same row-major
carrier the `Tensor` class validates at IO boundaries) and keeps gradients
in per-layer buffers; there is no autodiff graph.

Gradient conventions:
  * quantizers are bypassed with the straight-through estimator: the
    backward pass uses the dequantized forward operands as constants and
    passes gradients through unchanged;
  * the activation rotation backpropagates by applying the same orthonormal
    transform to the gradient;
  * RMSNorm, RoPE, softmax, SwiGLU and residuals use exact analytic
    gradients.

Layer layout follows the usual pre-norm decoder block: RMSNorm everywhere,
no biases, BitLinear for the QKV/up/gate projections and H-BitLinear
(internal RMSNorm + Hadamard rotation before quantization) for the
attention output and FFN down projections, whose inputs are the
outlier-prone intermediate states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant
from .errors import (
    MissingContextError,
    NotPowerOfTwoError,
    ShapeMismatchError,
)
from .hadamard import fwht, fwht_rows

RMSNORM_EPS = 1e-6


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class QuantMode:
    """Which quantizers are live for a forward/backward pass.

    act_bits None disables activation quantization (full-precision mode,
    used by gradient-check oracles); quantize_weights False disables the
    ternary weight quantizer. use_hadamard toggles the activation rotation
    in H-BitLinear layers; rotate_weights additionally quantizes the
    row-rotated weights so the rotation cancels in exact arithmetic.
    """

    act_bits: int | None = 8
    quantize_weights: bool = True
    use_hadamard: bool = True
    rotate_weights: bool = False

    def __post_init__(self):
        if self.act_bits not in (None, 4, 8):
            raise ValueError(f"act_bits must be None, 4 or 8, got {self.act_bits}")


FULL_PRECISION = QuantMode(act_bits=None, quantize_weights=False)


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------


def rmsnorm_forward(x: np.ndarray, gain: np.ndarray, eps: float = RMSNORM_EPS):
    """y = x / sqrt(mean(x^2) + eps) * gain, per row. Returns (y, ctx)."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[0]:
        raise ShapeMismatchError(
            f"gain length {gain.shape[0]} does not match feature dim {x.shape[-1]}"
        )
    inv_rms = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(eps))
    inv_rms = inv_rms.astype(np.float32)
    y = x * inv_rms * gain
    return y, (x, gain, inv_rms)


def rmsnorm_backward(upstream: np.ndarray, ctx) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients w.r.t. the input and the gain. Returns (dx, dgain)."""
    x, gain, inv_rms = ctx
    up = np.asarray(upstream, dtype=np.float32)
    d = x.shape[-1]
    u = up * gain
    dot = np.sum(u * x, axis=-1, keepdims=True)
    dx = inv_rms * (u - x * (dot * np.square(inv_rms) / np.float32(d)))
    dgain = np.sum(up * x * inv_rms, axis=tuple(range(up.ndim - 1)))
    return dx.astype(np.float32), dgain.astype(np.float32)


# ---------------------------------------------------------------------------
# Quantized linear core (shared by BitLinear and H-BitLinear)
# ---------------------------------------------------------------------------


def _quant_linear_forward(x: np.ndarray, w: np.ndarray, mode: QuantMode):
    """Forward of y = Q_w(w) . Q_act(x)^T with dequantized operands saved.

    Quantized paths run through the packed integer kernel; disabled
    quantizers degrade to the plain float GEMM.
    """
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatchError(
            f"input width {x.shape[-1]} does not match weight in_dim {w.shape[1]}"
        )
    if mode.quantize_weights:
        trits, alpha = quant.ternary_array(w)
        w_deq = (np.float32(alpha) * trits).astype(np.float32)
    else:
        trits, alpha = None, None
        w_deq = w

    if mode.act_bits is None:
        x_deq = x
        y = x @ w_deq.T
    else:
        if mode.act_bits == 8:
            codes, scale = quant.int8_rows(x)
            step = scale / np.float32(127.0)
        else:
            codes, scale = quant.int4_rows(x)
            step = scale / np.float32(quant.SQRT7)
        x_deq = codes.astype(np.float32) * step[:, None]
        if trits is not None:
            # trit*code partial sums are integers bounded by k*128 < 2^24
            # for k <= 2^16, so float32 BLAS accumulation is bit-identical
            # to the int32 packed kernel and much faster
            if x.shape[-1] <= 1 << 16:
                acc = codes.astype(np.float32) @ trits.astype(np.float32).T
            else:
                acc = (codes.astype(np.int32) @ trits.astype(np.int32).T).astype(
                    np.float32
                )
            y = acc * (np.float32(alpha) * step)[:, None]
        else:
            y = x_deq @ w_deq.T
    ctx = (x_deq, w_deq)
    return y.astype(np.float32), ctx


def _quant_linear_backward(upstream: np.ndarray, ctx):
    """STE backward: gradients flow through the dequantized operands."""
    x_deq, w_deq = ctx
    up = np.asarray(upstream, dtype=np.float32)
    dx = up @ w_deq
    gw = up.T @ x_deq
    return dx.astype(np.float32), gw.astype(np.float32)


class BitLinear:
    """Plain quantized projection: ternary weights, per-token activations."""

    def __init__(self, name: str, out_dim: int, in_dim: int, rng: np.random.Generator):
        self.name = name
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.w = (rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(
            np.float32
        )
        self.gw = np.zeros_like(self.w)
        self._ctx = None

    def forward(self, x: np.ndarray, mode: QuantMode) -> np.ndarray:
        y, self._ctx = _quant_linear_forward(x, self.w, mode)
        return y

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._ctx is None:
            raise MissingContextError(f"{self.name}: forward before backward")
        dx, gw = _quant_linear_backward(upstream, self._ctx)
        self.gw += gw
        return dx

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.w}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.gw}

    def zero_grads(self) -> None:
        self.gw[...] = 0.0


class HBitLinear:
    """Rotated quantized projection: RMSNorm, Hadamard, then quantized GEMM.

    The input width must be a power of two. The rotation can be switched
    off (ablation) or extended to the weights via the QuantMode; the
    norm gain is this layer's own parameter, separate from the block norms.
    """

    def __init__(self, name: str, out_dim: int, in_dim: int, rng: np.random.Generator):
        if not _is_pow2(in_dim):
            raise NotPowerOfTwoError(
                f"{name}: H-BitLinear input width must be a power of two, got {in_dim}"
            )
        self.name = name
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.w = (rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(
            np.float32
        )
        self.gain = np.ones(in_dim, dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.ggain = np.zeros_like(self.gain)
        self._ctx = None

    def forward(
        self,
        x: np.ndarray,
        mode: QuantMode,
        capture: dict | None = None,
        tag: str | None = None,
    ) -> np.ndarray:
        h, ln_ctx = rmsnorm_forward(x, self.gain)
        xr = fwht(h) if mode.use_hadamard else h
        if capture is not None and tag is not None:
            capture.setdefault(f"{tag}:pre_hadamard", []).append(h.copy())
            capture.setdefault(tag, []).append(xr.copy())
        w_eff = fwht_rows(self.w) if mode.rotate_weights else self.w
        y, core_ctx = _quant_linear_forward(xr, w_eff, mode)
        self._ctx = (ln_ctx, core_ctx, mode.use_hadamard, mode.rotate_weights)
        return y

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._ctx is None:
            raise MissingContextError(f"{self.name}: forward before backward")
        ln_ctx, core_ctx, used_hadamard, rotated_w = self._ctx
        dxr, gw_eff = _quant_linear_backward(upstream, core_ctx)
        self.gw += fwht_rows(gw_eff) if rotated_w else gw_eff
        dh = fwht(dxr) if used_hadamard else dxr
        dx, dgain = rmsnorm_backward(dh, ln_ctx)
        self.ggain += dgain
        return dx

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.w, f"{self.name}.gain": self.gain}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.gw, f"{self.name}.gain": self.ggain}

    def zero_grads(self) -> None:
        self.gw[...] = 0.0
        self.ggain[...] = 0.0


# ---------------------------------------------------------------------------
# Rotary position embedding (interleaved pairs, fixed base)
# ---------------------------------------------------------------------------

ROPE_BASE = 10000.0


def rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (seq_len, head_dim // 2)."""
    if head_dim % 2 != 0:
        raise ShapeMismatchError(f"head_dim must be even for rotary pairs, got {head_dim}")
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate interleaved pairs of x (..., seq, head_dim) by position."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_backward(up: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Gradient of rope_apply: rotation by the opposite angle."""
    even = up[..., 0::2]
    odd = up[..., 1::2]
    out = np.empty_like(up)
    out[..., 0::2] = even * cos + odd * sin
    out[..., 1::2] = -even * sin + odd * cos
    return out


# ---------------------------------------------------------------------------
# Transformer block
# ---------------------------------------------------------------------------


@dataclass
class BlockConfig:
    """Dimensions and quantization options for one decoder block."""

    hidden: int
    glu: int
    heads: int
    act_bits: int | None = 8
    use_hadamard: bool = True
    rotate_weights: bool = False
    quantize_weights: bool = True
    kv_bits: int | None = None
    q_bits: int | None = None
    # Fixed channel amplification of the intermediate states (attention
    # output and GLU product), used to inject outlier channels for the
    # rotation ablation. 1.0 disables it.
    outlier_scale: float = 1.0
    outlier_channels: int = 0

    def __post_init__(self):
        if not _is_pow2(self.hidden):
            raise NotPowerOfTwoError(f"hidden must be a power of two, got {self.hidden}")
        if not _is_pow2(self.glu):
            raise NotPowerOfTwoError(f"glu must be a power of two, got {self.glu}")
        if self.hidden % self.heads != 0:
            raise ShapeMismatchError(
                f"heads {self.heads} must divide hidden {self.hidden}"
            )
        if (self.hidden // self.heads) % 2 != 0:
            raise ShapeMismatchError("head_dim must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def quant_mode(self) -> QuantMode:
        return QuantMode(
            act_bits=self.act_bits,
            quantize_weights=self.quantize_weights,
            use_hadamard=self.use_hadamard,
            rotate_weights=self.rotate_weights,
        )


def _outlier_boost(x: np.ndarray, channels: int, scale: float) -> np.ndarray | None:
    """Content-dependent outlier injection: amplify each row's top-|x| channels.

    Returns a per-row multiplier that scales the `channels` largest-magnitude
    entries by `scale`, turning every row into the outlier-channel shape low-bit
    quantizers struggle with. Because the amplified positions follow the row
    content, the optimizer cannot route around fixed channels. The multiplier
    is treated as a constant in the backward pass.
    """
    if channels <= 0 or scale == 1.0:
        return None
    k = min(channels, x.shape[-1])
    idx = np.argpartition(np.abs(x), -k, axis=-1)[:, -k:]
    boost = np.ones_like(x)
    np.put_along_axis(boost, idx, np.float32(scale), axis=-1)
    return boost


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _fake_quant_heads(
    x: np.ndarray, bits: int, bos_first: bool
) -> np.ndarray:
    """Quantize-dequantize per-head rows of (b, H, s, hd) attention states.

    Rows at sequence position 0 are treated as the BOS token and kept at
    8 bits.
    """
    b, n_heads, s, hd = x.shape
    rows = x.reshape(-1, hd)
    if bos_first:
        mask = np.zeros((b, n_heads, s), dtype=bool)
        mask[:, :, 0] = True
        mask = mask.reshape(-1)
    else:
        mask = None
    codes, gamma, bits_per_token = quant.kv_unsigned_rows(rows, bits, mask)
    half = np.exp2(bits_per_token.astype(np.float32) - 1.0)
    deq = (codes.astype(np.float32) - half[:, None]) * (gamma / half)[:, None]
    return deq.reshape(b, n_heads, s, hd).astype(np.float32)


class TransformerBlock:
    """Pre-norm decoder block: causal attention plus a SwiGLU FFN.

    Attention projections use BitLinear for QKV and H-BitLinear for the
    output projection; the FFN uses BitLinear up/gate and H-BitLinear down.
    RoPE is applied to Q and K before any attention-state quantization.
    Everything except the quantized projections stays full precision.
    """

    def __init__(self, name: str, cfg: BlockConfig, rng: np.random.Generator):
        self.name = name
        self.cfg = cfg
        h, g = cfg.hidden, cfg.glu
        self.g_attn = np.ones(h, dtype=np.float32)
        self.g_ffn = np.ones(h, dtype=np.float32)
        self.gg_attn = np.zeros_like(self.g_attn)
        self.gg_ffn = np.zeros_like(self.g_ffn)
        self.w_qkv = BitLinear(f"{name}.w_qkv", 3 * h, h, rng)
        self.w_o = HBitLinear(f"{name}.w_o", h, h, rng)
        self.w_up = BitLinear(f"{name}.w_up", g, h, rng)
        self.w_gate = BitLinear(f"{name}.w_gate", g, h, rng)
        self.w_down = HBitLinear(f"{name}.w_down", h, g, rng)
        self._ctx = None

    # -- forward -----------------------------------------------------------

    def forward(self, x: np.ndarray, capture: dict | None = None) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.cfg.hidden:
            raise ShapeMismatchError(
                f"expected (batch, seq, {self.cfg.hidden}), got {x.shape}"
            )
        cfg = self.cfg
        mode = cfg.quant_mode()
        b, s, h = x.shape
        n_heads, hd = cfg.heads, cfg.head_dim
        scale = np.float32(1.0 / np.sqrt(hd))

        # attention
        x_flat = x.reshape(-1, h)
        hn, ln_attn_ctx = rmsnorm_forward(x_flat, self.g_attn)
        if capture is not None:
            capture.setdefault("W_qkv", []).append(hn.copy())
        qkv = self.w_qkv.forward(hn, mode)
        qkv = qkv.reshape(b, s, 3, n_heads, hd)
        q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))
        k = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
        v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
        cos, sin = rope_tables(s, hd)
        q = rope_apply(q, cos, sin)
        k = rope_apply(k, cos, sin)
        # post-RoPE attention-state quantization (STE in backward)
        if cfg.q_bits is not None:
            q = _fake_quant_heads(q, cfg.q_bits, bos_first=True)
        if cfg.kv_bits is not None:
            k = _fake_quant_heads(k, cfg.kv_bits, bos_first=True)
            v = _fake_quant_heads(v, cfg.kv_bits, bos_first=True)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        causal = np.triu(np.full((s, s), -np.inf, dtype=np.float32), k=1)
        p = _softmax_last(scores + causal)
        attn = np.matmul(p, v)  # (b, heads, s, hd)
        attn_flat = np.ascontiguousarray(attn.transpose(0, 2, 1, 3)).reshape(-1, h)
        attn_boost = _outlier_boost(attn_flat, cfg.outlier_channels, cfg.outlier_scale)
        if attn_boost is not None:
            attn_flat = attn_flat * attn_boost
        if capture is not None:
            o_out = self.w_o.forward(attn_flat, mode, capture, "W_o")
        else:
            o_out = self.w_o.forward(attn_flat, mode)
        x1 = x + o_out.reshape(b, s, h)

        # FFN
        x1_flat = x1.reshape(-1, h)
        hn2, ln_ffn_ctx = rmsnorm_forward(x1_flat, self.g_ffn)
        if capture is not None:
            capture.setdefault("W_up,gate", []).append(hn2.copy())
        u = self.w_up.forward(hn2, mode)
        g = self.w_gate.forward(hn2, mode)
        sig = _sigmoid(g)
        a = (g * sig) * u
        ffn_boost = _outlier_boost(a, cfg.outlier_channels, cfg.outlier_scale)
        if ffn_boost is not None:
            a = a * ffn_boost
        if capture is not None:
            down = self.w_down.forward(a, mode, capture, "W_down")
        else:
            down = self.w_down.forward(a, mode)
        y = x1 + down.reshape(b, s, h)

        self._ctx = (
            (b, s),
            ln_attn_ctx,
            (q, k, v, p, cos, sin, scale),
            ln_ffn_ctx,
            (u, g, sig),
            (attn_boost, ffn_boost),
        )
        return y.astype(np.float32)

    # -- backward ----------------------------------------------------------

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._ctx is None:
            raise MissingContextError(f"{self.name}: forward before backward")
        (b, s), ln_attn_ctx, attn_ctx, ln_ffn_ctx, ffn_ctx, boosts = self._ctx
        cfg = self.cfg
        h = cfg.hidden
        n_heads, hd = cfg.heads, cfg.head_dim
        q, k, v, p, cos, sin, scale = attn_ctx
        u, g, sig = ffn_ctx
        attn_boost, ffn_boost = boosts

        # FFN path
        dy = np.asarray(dy, dtype=np.float32)
        d_down = dy.reshape(-1, h)
        da = self.w_down.backward(d_down)
        if ffn_boost is not None:
            da = da * ffn_boost
        silu = g * sig
        du = da * silu
        dg = da * u * (sig * (1.0 + g * (1.0 - sig)))
        dhn2 = self.w_up.backward(du) + self.w_gate.backward(dg)
        dx1_flat, dg_ffn = rmsnorm_backward(dhn2, ln_ffn_ctx)
        self.gg_ffn += dg_ffn
        dx1 = dy + dx1_flat.reshape(b, s, h)

        # attention path
        d_o = dx1.reshape(-1, h)
        dattn_flat = self.w_o.backward(d_o)
        if attn_boost is not None:
            dattn_flat = dattn_flat * attn_boost
        dattn = dattn_flat.reshape(b, s, n_heads, hd).transpose(0, 2, 1, 3)
        dp = np.matmul(dattn, v.transpose(0, 1, 3, 2))
        dv = np.matmul(p.transpose(0, 1, 3, 2), dattn)
        dscores = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dq = np.matmul(dscores, k) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q) * scale
        # attention-state quantizers are bypassed (straight-through)
        dq = rope_backward(dq, cos, sin)
        dk = rope_backward(dk, cos, sin)
        dqkv = np.empty((b, s, 3, n_heads, hd), dtype=np.float32)
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        dhn = self.w_qkv.backward(dqkv.reshape(-1, 3 * h))
        dx_flat, dg_attn = rmsnorm_backward(dhn, ln_attn_ctx)
        self.gg_attn += dg_attn
        dx = dx1 + dx_flat.reshape(b, s, h)
        return dx.astype(np.float32)

    # -- parameter registry --------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {
            f"{self.name}.g_attn": self.g_attn,
            f"{self.name}.g_ffn": self.g_ffn,
        }
        for layer in (self.w_qkv, self.w_o, self.w_up, self.w_gate, self.w_down):
            out.update(layer.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {
            f"{self.name}.g_attn": self.gg_attn,
            f"{self.name}.g_ffn": self.gg_ffn,
        }
        for layer in (self.w_qkv, self.w_o, self.w_up, self.w_gate, self.w_down):
            out.update(layer.grads())
        return out

    def zero_grads(self) -> None:
        self.gg_attn[...] = 0.0
        self.gg_ffn[...] = 0.0
        for layer in (self.w_qkv, self.w_o, self.w_up, self.w_gate, self.w_down):
            layer.zero_grads()
