"""Four-direction identity-initialized recurrent scans and the two-round
spatial-context module.

The recurrence per direction is h <- max(W_hh @ h_prev + x, 0), swept along
rows (right/left) or columns (down/up); rows/columns are independent, so the
sweep vectorizes over batch and the orthogonal spatial axis.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import config
from .tensor import ConvWeights, ShapeError, Tensor4, concat_channels, conv, make_op

DIRECTIONS = ("right", "left", "down", "up")  # normative concat order


def _scan_right_forward(data: np.ndarray, wm: np.ndarray) -> np.ndarray:
    n, c, h, w = data.shape
    out = np.empty_like(data)
    hprev = np.zeros((n, c, h), dtype=data.dtype)
    for j in range(w):
        pre = np.einsum("kc,nch->nkh", wm, hprev) + data[:, :, :, j]
        hprev = np.maximum(pre, 0)
        out[:, :, :, j] = hprev
    return out

def _scan_right_backward(gout: np.ndarray, out: np.ndarray, wm: np.ndarray):
    n, c, h, w = gout.shape
    gx = np.empty_like(gout)
    gw = np.zeros_like(wm)
    gh = np.zeros((n, c, h), dtype=gout.dtype)
    for j in range(w - 1, -1, -1):
        g = (gout[:, :, :, j] + gh) * (out[:, :, :, j] > 0)
        gx[:, :, :, j] = g
        if j > 0:
            gw += np.einsum("nkh,nch->kc", g, out[:, :, :, j - 1])
        gh = np.einsum("kc,nkh->nch", wm, g)
    return gx, gw


def _to_right(data: np.ndarray, direction: str) -> np.ndarray:
    """Map a tensor so the requested sweep becomes a rightward sweep."""
    if direction == "right":
        return data
    if direction == "left":
        return data[:, :, :, ::-1]
    if direction == "down":
        return data.swapaxes(2, 3)
    if direction == "up":
        return data[:, :, ::-1, :].swapaxes(2, 3)
    raise ValueError(f"unknown scan direction {direction!r}")


def _from_right(data: np.ndarray, direction: str) -> np.ndarray:
    if direction == "right":
        return data
    if direction == "left":
        return data[:, :, :, ::-1]
    if direction == "down":
        return data.swapaxes(2, 3)
    if direction == "up":
        return data.swapaxes(2, 3)[:, :, ::-1, :]
    raise ValueError(f"unknown scan direction {direction!r}")


def scan(x: Tensor4, w_hh: Tensor4, direction: str) -> Tensor4:
    """Directional recurrent sweep; w_hh is (c, c, 1, 1)."""
    c = x.dims[1]
    if w_hh.dims != (c, c, 1, 1):
        raise ShapeError(f"w_hh dims {w_hh.dims} do not match channels {c}")
    wm = w_hh.data.reshape(c, c)
    xr = np.ascontiguousarray(_to_right(x.data, direction))
    outr = _scan_right_forward(xr, wm)
    out = _from_right(outr, direction).copy()

    def vjp(gout):
        gr = np.ascontiguousarray(_to_right(gout, direction))
        gxr, gw = _scan_right_backward(gr, outr, wm)
        gx = _from_right(gxr, direction).copy()
        return gx, gw.reshape(w_hh.dims)

    return make_op(out, f"scan_{direction}", (x, w_hh), vjp)


@dataclass
class IrnnWeights:
    """One round of the spatial-context module: 1x1 input projection, four
    recurrent matrices, and a 1x1 fusion of the concatenated direction outputs."""

    input_proj: ConvWeights          # c_in -> c_hid
    w_hh: dict[str, Tensor4] = field(default_factory=dict)  # per direction, (c_hid, c_hid, 1, 1)
    mix_proj: ConvWeights = None     # 4*c_hid -> c_out

    @classmethod
    def create(cls, c_in: int, c_hid: int, c_out: int,
               rng: np.random.Generator, dtype=np.float32) -> "IrnnWeights":
        input_proj = ConvWeights.create(c_hid, c_in, 1, rng, dtype)
        eye = np.eye(c_hid, dtype=dtype).reshape(c_hid, c_hid, 1, 1)
        w_hh = {d: Tensor4(eye.copy()) for d in DIRECTIONS}
        mix_proj = ConvWeights.create(c_out, 4 * c_hid, 1, rng, dtype)
        return cls(input_proj=input_proj, w_hh=w_hh, mix_proj=mix_proj)

    def params(self, prefix: str) -> dict[str, Tensor4]:
        out = {
            f"{prefix}.input_proj.kernel": self.input_proj.kernel,
            f"{prefix}.input_proj.bias": self.input_proj.bias,
            f"{prefix}.mix_proj.kernel": self.mix_proj.kernel,
            f"{prefix}.mix_proj.bias": self.mix_proj.bias,
        }
        for d in DIRECTIONS:
            out[f"{prefix}.w_hh.{d}"] = self.w_hh[d]
        return out


@dataclass
class SrnnConfig:
    rounds: int = 2
    c_hid: int = 0   # 0: match the input channel width
    c_out: int = 0   # 0: match c_hid

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")


def srnn_round(x: Tensor4, w: IrnnWeights) -> Tensor4:
    proj = conv(x, w.input_proj)
    threads = config.num_threads()
    if threads > 1 and not config.grad_enabled():
        with ThreadPoolExecutor(max_workers=min(threads, 4)) as pool:
            futs = [pool.submit(scan, proj, w.w_hh[d], d) for d in DIRECTIONS]
            outs = [f.result() for f in futs]
    else:
        outs = [scan(proj, w.w_hh[d], d) for d in DIRECTIONS]
    return conv(concat_channels(outs), w.mix_proj)


def srnn_module(x: Tensor4, cfg: SrnnConfig, weights: list[IrnnWeights]) -> Tensor4:
    if len(weights) != cfg.rounds:
        raise ValueError(
            f"expected {cfg.rounds} weight sets, got {len(weights)}")
    out = x
    for w in weights:
        out = srnn_round(out, w)
    return out


def create_srnn_weights(c_in: int, cfg: SrnnConfig, rng: np.random.Generator,
                        dtype=np.float32) -> list[IrnnWeights]:
    c_hid = cfg.c_hid or c_in
    c_out = cfg.c_out or c_hid
    weights = []
    cur = c_in
    for _ in range(cfg.rounds):
        weights.append(IrnnWeights.create(cur, c_hid, c_out, rng, dtype))
        cur = c_out
    return weights
