"""Differentiable operation set and numerical plumbing.

The ops here are thin, explicit compositions of torch primitives: reverse-mode
gradients come from torch autograd, while :func:`grad_check` provides the
independent central-finite-difference route used to verify them.  Models run
in float32; gradient-check builds convert to float64.

Also home to the named-tensor checkpoint container and the differentiable
overlap-add iSTFT used by the training loss (its numpy twin in
:mod:`hintstream.dsp` is the reference implementation).
"""

from __future__ import annotations

import struct
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericFaultError

_NEG_INF = float("-inf")


def ensure_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericFaultError(f"non-finite values in {what}")
    return t


def uniform_init_(tensor: torch.Tensor, fan_in: int) -> torch.Tensor:
    """In-place uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / float(fan_in) ** 0.5
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


def causal_conv1d(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """1-D convolution with left zero padding of k-1.

    ``x`` is (..., C_in, T), ``weight`` is (C_out, C_in, k); output at time t
    depends only on inputs at times <= t.
    """
    if x.shape[-2] != weight.shape[1]:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[-2]}, kernel expects {weight.shape[1]}"
        )
    k = weight.shape[-1]
    lead = x.shape[:-2]
    xf = x.reshape(-1, x.shape[-2], x.shape[-1])
    xf = F.pad(xf, (k - 1, 0))
    out = F.conv1d(xf, weight, bias)
    return out.reshape(*lead, weight.shape[0], x.shape[-1])


def lstm_step(
    x: torch.Tensor,
    state: Tuple[torch.Tensor, torch.Tensor],
    w_ih: torch.Tensor,
    w_hh: torch.Tensor,
    b_ih: torch.Tensor,
    b_hh: torch.Tensor,
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """One LSTM recurrence step.

    Weights follow the (input, forget, cell, output) gate layout of
    ``torch.nn.LSTM``: ``w_ih`` is (4H, D), ``w_hh`` is (4H, H).  ``x`` is
    (..., D) and the state tensors are (..., H).
    """
    h, c = state
    hidden = w_hh.shape[1]
    if x.shape[-1] != w_ih.shape[1] or h.shape[-1] != hidden:
        raise ConfigError("lstm_step dimension mismatch")
    gates = x @ w_ih.T + b_ih + h @ w_hh.T + b_hh
    i, f, g, o = gates.split(hidden, dim=-1)
    i = torch.sigmoid(i)
    f = torch.sigmoid(f)
    g = torch.tanh(g)
    o = torch.sigmoid(o)
    c_new = f * c + i * g
    h_new = o * torch.tanh(c_new)
    return h_new, (h_new, c_new)


def lstm_sequence(
    x: torch.Tensor,
    state: Tuple[torch.Tensor, torch.Tensor],
    w_ih: torch.Tensor,
    w_hh: torch.Tensor,
    b_ih: torch.Tensor,
    b_hh: torch.Tensor,
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """Unrolled application of :func:`lstm_step` over axis -2 of ``x``."""
    outs = []
    for t in range(x.shape[-2]):
        y, state = lstm_step(x[..., t, :], state, w_ih, w_hh, b_ih, b_hh)
        outs.append(y)
    return torch.stack(outs, dim=-2), state


def softmax_stable(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax; rows that are entirely -inf produce zeros."""
    m = logits.amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(logits - m)
    denom = e.sum(dim=dim, keepdim=True)
    return e / torch.where(denom == 0, torch.ones_like(denom), denom)


def mha(
    query: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    num_heads: int,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    ``query`` is (..., T_q, D) and ``keys``/``values`` are (..., T_kv, D).
    Projections are (D, D) matrices applied as ``x @ w.T``.  ``mask`` is a
    boolean (T_q, T_kv) (or broadcastable) tensor, True = may attend.  A query
    whose row is fully masked yields a zero attention output (callers add
    their own residual).
    """
    d = query.shape[-1]
    if d % num_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {num_heads} heads")
    head = d // num_heads

    def split_heads(x):
        return x.reshape(*x.shape[:-1], num_heads, head).transpose(-3, -2)

    q = split_heads(query @ w_q.T)  # (..., heads, T_q, head)
    k = split_heads(keys @ w_k.T)
    v = split_heads(values @ w_v.T)
    scores = q @ k.transpose(-2, -1) / head**0.5
    if mask is not None:
        scores = scores.masked_fill(~mask, _NEG_INF)
    attn = softmax_stable(scores, dim=-1)
    out = attn @ v  # (..., heads, T_q, head)
    out = out.transpose(-3, -2).reshape(*query.shape[:-1], d)
    return out @ w_o.T


def film(
    z: torch.Tensor,
    cond: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
) -> torch.Tensor:
    """Feature-wise linear modulation: ``gamma(cond) * z + beta(cond)``.

    ``z`` is (..., D), ``cond`` is (..., D_e) with matching leading dims,
    ``weight`` is (2D, D_e) and ``bias`` is (2D,); the first D rows produce
    gamma and the last D produce beta.
    """
    d = z.shape[-1]
    if weight.shape[0] != 2 * d or weight.shape[1] != cond.shape[-1]:
        raise ConfigError(
            f"film weight {tuple(weight.shape)} inconsistent with "
            f"z dim {d} and cond dim {cond.shape[-1]}"
        )
    gb = cond @ weight.T + bias
    gamma, beta = gb.split(d, dim=-1)
    return gamma * z + beta


def istft_overlap_add(
    spec: torch.Tensor, window_len: int, hop_len: int
) -> torch.Tensor:
    """Differentiable twin of :func:`hintstream.dsp.istft`.

    ``spec`` is a complex tensor (..., F, T); returns (..., length) real
    samples with the same square-root Hann synthesis and window-power
    normalisation as the numpy reference.
    """
    if spec.shape[-2] != window_len // 2 + 1:
        raise ConfigError("bin count inconsistent with window_len")
    t = spec.shape[-1]
    from .dsp import sqrt_hann

    window = torch.from_numpy(sqrt_hann(window_len)).to(
        dtype=spec.real.dtype, device=spec.device
    )
    frames = torch.fft.irfft(spec.transpose(-2, -1), n=window_len) * window
    length = (t - 1) * hop_len + window_len
    lead = frames.shape[:-2]
    out = frames.new_zeros(*lead, length)
    wsum = torch.zeros(length, dtype=window.dtype)
    for i in range(t):
        out[..., i * hop_len : i * hop_len + window_len] = (
            out[..., i * hop_len : i * hop_len + window_len] + frames[..., i, :]
        )
        wsum[i * hop_len : i * hop_len + window_len] += window**2
    scale = torch.where(wsum > 1e-12, 1.0 / wsum.clamp_min(1e-12), torch.zeros_like(wsum))
    return out * scale


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` evaluates a scalar from the float64 leaf tensors ``params``
    (``requires_grad=True``).  Returns the worst per-tensor relative error
    ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ConfigError("grad_check requires float64 parameters")
        if p.grad is not None:
            p.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise ConfigError("grad_check target must be scalar")
    ensure_finite(loss, "grad_check loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = (
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        )
        numeric = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        nflat = numeric.reshape(-1)
        with torch.no_grad():
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = fn().item()
                flat[idx] = orig - eps
                down = fn().item()
                flat[idx] = orig
                nflat[idx] = (up - down) / (2.0 * eps)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericFaultError("non-finite value during finite differencing")
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
        err = (analytic - numeric).abs().max().item() / scale
        worst = max(worst, err)
    return worst


# --- checkpoint container -------------------------------------------------

_MAGIC = b"HSCK"
_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], config_hash: str) -> None:
    """Write named tensors to the binary container, tagged with a config hash."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        hash_bytes = config_hash.encode("utf-8")
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            t = tensor.detach().cpu().contiguous()
            if t.dtype not in _DTYPE_TAGS:
                raise ConfigError(f"unsupported checkpoint dtype {t.dtype} for {name}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", _DTYPE_TAGS[t.dtype]))
            fh.write(struct.pack("<B", t.dim()))
            for d in t.shape:
                fh.write(struct.pack("<I", d))
            payload = t.numpy().astype(_NP_DTYPES[_DTYPE_TAGS[t.dtype]], copy=False)
            fh.write(payload.tobytes())


def load_checkpoint(path, expected_hash: Optional[str] = None):
    """Read a checkpoint container; returns (tensors, config_hash).

    If ``expected_hash`` is given and differs, raises :class:`ConfigError`.
    """
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (hash_len,) = struct.unpack("<H", fh.read(2))
        config_hash = fh.read(hash_len).decode("utf-8")
        if expected_hash is not None and config_hash != expected_hash:
            raise ConfigError(
                f"checkpoint config hash {config_hash} does not match "
                f"expected {expected_hash}"
            )
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: Dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = [struct.unpack("<I", fh.read(4))[0] for _ in range(ndim)]
            numel = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(
                fh.read(numel * np.dtype(_NP_DTYPES[tag]).itemsize),
                dtype=_NP_DTYPES[tag],
            ).reshape(shape)
            tensors[name] = torch.from_numpy(raw.copy()).to(_TAG_DTYPES[tag])
    return tensors, config_hash


def save_model_checkpoint(path, model: torch.nn.Module, config_hash: str) -> None:
    save_checkpoint(path, dict(model.state_dict()), config_hash)


def load_model_checkpoint(path, model: torch.nn.Module, expected_hash=None) -> str:
    tensors, config_hash = load_checkpoint(path, expected_hash)
    model.load_state_dict(tensors)
    return config_hash
