"""Multi-dimensional GRU segmentation network.

The network runs a convolutional GRU over each spatial dimension in both
directions (four scans for 2-D slices), sums the four hidden-state maps,
optionally adds a 1x1-projected input skip, and maps the result to per-pixel
class logits with a 1x1 classifier convolution.

Within one scan the image rows (or columns) play the role of time steps; the
gate convolutions act along the other spatial dimension. Because every step
input has extent 1 along the scanned dimension, only the center row of each
stored k x k kernel meets data; the remaining taps receive zero gradient and
stay at their initial values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

SCAN_KEYS = ("rows_fwd", "rows_bwd", "cols_fwd", "cols_bwd")
AXES = ("rows", "cols")
DIRECTIONS = ("forward", "backward")


@dataclass
class MDGRUConfig:
    in_channels: int
    hidden_channels: int = 16
    kernel_size: int = 7
    num_classes: int = 3
    dropout_rate: float = 0.5
    dropconnect_on_state: bool = True
    residual: bool = True
    combine_mode: str = "sum"

    def validate(self) -> "MDGRUConfig":
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.combine_mode not in ("sum", "concat"):
            raise ConfigError(f"combine_mode must be sum or concat, got {self.combine_mode!r}")
        return self

    @property
    def combined_channels(self) -> int:
        return self.hidden_channels * (4 if self.combine_mode == "concat" else 1)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "kernel_size": self.kernel_size,
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
            "dropconnect_on_state": self.dropconnect_on_state,
            "residual": self.residual,
            "combine_mode": self.combine_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MDGRUConfig":
        return cls(**d).validate()


@dataclass
class CGRUParams:
    """Gate parameters of one directional convolutional GRU."""

    w_r: T.Tensor
    w_z: T.Tensor
    w_h: T.Tensor
    u_r: T.Tensor
    u_z: T.Tensor
    u_h: T.Tensor
    b_r: T.Tensor
    b_z: T.Tensor
    b_h: T.Tensor

    def validate(self) -> "CGRUParams":
        k = self.w_r.shape[0]
        cin, ch = self.w_r.shape[2], self.w_r.shape[3]
        for name in ("w_r", "w_z", "w_h"):
            if getattr(self, name).shape != (k, k, cin, ch):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} inconsistent")
        for name in ("u_r", "u_z", "u_h"):
            if getattr(self, name).shape != (k, k, ch, ch):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} inconsistent")
        for name in ("b_r", "b_z", "b_h"):
            if getattr(self, name).shape != (ch,):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} inconsistent")
        if k % 2 == 0:
            raise ShapeError(f"kernel extent must be odd, got {k}")
        return self

    @property
    def hidden_channels(self) -> int:
        return self.w_r.shape[3]

    def named(self, prefix: str):
        for name in ("w_r", "w_z", "w_h", "u_r", "u_z", "u_h", "b_r", "b_z", "b_h"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class MDGRUParams:
    """All trainable arrays: four directional C-GRUs, classifier, input skip."""

    scans: dict[str, CGRUParams]
    cls_kernel: T.Tensor
    cls_bias: T.Tensor
    res_kernel: T.Tensor | None = None
    res_bias: T.Tensor | None = None

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        out: list[tuple[str, T.Tensor]] = []
        for key in SCAN_KEYS:
            out.extend(self.scans[key].named(key))
        out.append(("cls_kernel", self.cls_kernel))
        out.append(("cls_bias", self.cls_bias))
        if self.res_kernel is not None:
            out.append(("res_kernel", self.res_kernel))
            out.append(("res_bias", self.res_bias))
        return out

    def parameters(self) -> list[T.Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape, scale: float) -> T.Tensor:
    return T.Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def init_params(config: MDGRUConfig, seed: int | np.random.Generator = 0) -> MDGRUParams:
    """Deterministic uniform init scaled by the active fan-in of each kernel."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k, cin, ch = config.kernel_size, config.in_channels, config.hidden_channels
    sx = 1.0 / np.sqrt(k * cin)
    sh = 1.0 / np.sqrt(k * ch)
    scans = {}
    for key in SCAN_KEYS:
        scans[key] = CGRUParams(
            w_r=_uniform(rng, (k, k, cin, ch), sx),
            w_z=_uniform(rng, (k, k, cin, ch), sx),
            w_h=_uniform(rng, (k, k, cin, ch), sx),
            u_r=_uniform(rng, (k, k, ch, ch), sh),
            u_z=_uniform(rng, (k, k, ch, ch), sh),
            u_h=_uniform(rng, (k, k, ch, ch), sh),
            b_r=T.Tensor(np.zeros(ch), requires_grad=True),
            b_z=T.Tensor(np.zeros(ch), requires_grad=True),
            b_h=T.Tensor(np.zeros(ch), requires_grad=True),
        ).validate()
    cc = config.combined_channels
    cls_kernel = _uniform(rng, (1, 1, cc, config.num_classes), 1.0 / np.sqrt(cc))
    cls_bias = T.Tensor(np.zeros(config.num_classes), requires_grad=True)
    res_kernel = res_bias = None
    if config.residual:
        res_kernel = _uniform(rng, (1, 1, cin, cc), 1.0 / np.sqrt(cin))
        res_bias = T.Tensor(np.zeros(cc), requires_grad=True)
    return MDGRUParams(scans, cls_kernel, cls_bias, res_kernel, res_bias)


# ---------------------------------------------------------------------------
# the recurrence


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _recurrence_core(ax_r: T.Tensor, ax_z: T.Tensor, ax_h: T.Tensor,
                     u_r: T.Tensor, u_z: T.Tensor, u_h: T.Tensor,
                     masks: dict[str, np.ndarray] | None,
                     h0: T.Tensor | None = None) -> T.Tensor:
    """Run all gate updates of one scan as a single fused tape node.

    ax_* hold the precomputed input-side activations (H, W, Ch), one row per
    step. The recurrent convolutions use the center rows of the k x k state
    kernels u_* (optionally dropconnect-masked); the backward pass replays
    the recurrence in reverse (backpropagation through time).

    Step t: r = sig(ax_r[t] + h conv Ur), z = sig(ax_z[t] + h conv Uz),
    cand = tanh(ax_h[t] + (r*h) conv Uh), h' = (1 - z)*h + z*cand.
    """
    steps, width, ch = ax_r.shape
    k = u_r.shape[0]
    kc, pad = k // 2, k // 2
    masks = masks or {}

    def center(kernel: T.Tensor, name: str) -> np.ndarray:
        row = kernel.data[kc]
        mask = masks.get(name)
        if mask is not None:
            row = row * mask[kc]
        return row.reshape(k * ch, ch)

    u_mats = {"u_r": center(u_r, "u_r"), "u_z": center(u_z, "u_z"),
              "u_h": center(u_h, "u_h")}

    buf = np.zeros((width + k - 1, ch))

    def conv_cols_into(arr: np.ndarray, dest: np.ndarray) -> None:
        buf[pad:pad + width] = arr
        for i in range(k):
            dest[:, i * ch:(i + 1) * ch] = buf[i:i + width]

    h = np.zeros((width, ch)) if h0 is None else h0.data.reshape(width, ch).copy()
    out = np.empty((steps, width, ch))
    rs = np.empty((steps, width, ch))
    zs = np.empty((steps, width, ch))
    cands = np.empty((steps, width, ch))
    cols_h = np.empty((steps, width, k * ch))
    cols_rh = np.empty((steps, width, k * ch))
    h_start = h.copy()

    for t in range(steps):
        conv_cols_into(h, cols_h[t])
        r = _stable_sigmoid(ax_r.data[t] + cols_h[t] @ u_mats["u_r"])
        z = _stable_sigmoid(ax_z.data[t] + cols_h[t] @ u_mats["u_z"])
        conv_cols_into(r * h, cols_rh[t])
        cand = np.tanh(ax_h.data[t] + cols_rh[t] @ u_mats["u_h"])
        h = (1.0 - z) * h + z * cand
        out[t], rs[t], zs[t], cands[t] = h, r, z, cand

    def overlap_add(dcols: np.ndarray) -> np.ndarray:
        dbuf = np.zeros((width + k - 1, ch))
        for i in range(k):
            dbuf[i:i + width] += dcols[:, i * ch:(i + 1) * ch]
        return dbuf[pad:pad + width]

    def scatter_kernel_grad(dmat: np.ndarray, kernel: T.Tensor, name: str,
                            cot) -> None:
        if not (kernel.requires_grad or kernel._parents):
            return
        dcenter = dmat.reshape(k, ch, ch)
        mask = masks.get(name)
        if mask is not None:
            dcenter = dcenter * mask[kc]
        grad = np.zeros_like(kernel.data)
        grad[kc] = dcenter
        T._send(kernel, grad, cot)

    def backward(ct, cot):
        d_ax_r = np.empty_like(rs)
        d_ax_z = np.empty_like(zs)
        d_ax_h = np.empty_like(cands)
        du = {name: np.zeros_like(mat) for name, mat in u_mats.items()}
        ut = {name: mat.T.copy() for name, mat in u_mats.items()}
        dh_next = np.zeros((width, ch))
        for t in range(steps - 1, -1, -1):
            dh = ct[t] + dh_next
            h_prev = out[t - 1] if t > 0 else h_start
            r, z, cand = rs[t], zs[t], cands[t]
            dz = dh * (cand - h_prev)
            dcand = dh * z
            dh_prev = dh * (1.0 - z)

            dpre_c = dcand * (1.0 - cand * cand)
            d_ax_h[t] = dpre_c
            du["u_h"] += cols_rh[t].T @ dpre_c
            drh = overlap_add(dpre_c @ ut["u_h"])
            dr = drh * h_prev
            dh_prev += drh * r

            dpre_r = dr * r * (1.0 - r)
            d_ax_r[t] = dpre_r
            du["u_r"] += cols_h[t].T @ dpre_r
            dh_prev += overlap_add(dpre_r @ ut["u_r"])

            dpre_z = dz * z * (1.0 - z)
            d_ax_z[t] = dpre_z
            du["u_z"] += cols_h[t].T @ dpre_z
            dh_prev += overlap_add(dpre_z @ ut["u_z"])

            dh_next = dh_prev
        T._send(ax_r, d_ax_r, cot)
        T._send(ax_z, d_ax_z, cot)
        T._send(ax_h, d_ax_h, cot)
        scatter_kernel_grad(du["u_r"], u_r, "u_r", cot)
        scatter_kernel_grad(du["u_z"], u_z, "u_z", cot)
        scatter_kernel_grad(du["u_h"], u_h, "u_h", cot)
        if h0 is not None:
            T._send(h0, dh_next.reshape(h0.shape), cot)

    parents = (ax_r, ax_z, ax_h, u_r, u_z, u_h)
    if h0 is not None:
        parents = parents + (h0,)
    return T._make(out, parents, backward)


def cgru_step(x_t: T.Tensor, h_prev: T.Tensor, params: CGRUParams,
              masks: dict[str, np.ndarray] | None = None) -> T.Tensor:
    """Advance the hidden state by one scan position.

    x_t is (1, W, Cin), h_prev (1, W, Ch); returns the next (1, W, Ch) state:
    r = sig(conv(x, W_r) + conv(h, U_r) + b_r)
    z = sig(conv(x, W_z) + conv(h, U_z) + b_z)
    cand = tanh(conv(x, W_h) + conv(r*h, U_h) + b_h)
    h' = (1 - z)*h + z*cand
    """
    if x_t.data.ndim != 3 or x_t.shape[0] != 1:
        raise ShapeError(f"step input must be (1, W, Cin), got {x_t.shape}")
    if h_prev.shape[:2] != x_t.shape[:2] or h_prev.shape[2] != params.hidden_channels:
        raise ShapeError(f"hidden state {h_prev.shape} inconsistent with "
                         f"input {x_t.shape} and {params.hidden_channels} channels")
    ax_r = T.conv2d(x_t, params.w_r, params.b_r)
    ax_z = T.conv2d(x_t, params.w_z, params.b_z)
    ax_h = T.conv2d(x_t, params.w_h, params.b_h)
    return _recurrence_core(ax_r, ax_z, ax_h, params.u_r, params.u_z,
                            params.u_h, masks, h0=h_prev)


def cgru_scan(inp: T.Tensor, params: CGRUParams, axis: str = "rows",
              direction: str = "forward",
              masks: dict[str, np.ndarray] | None = None) -> T.Tensor:
    """Run the recurrence along one spatial dimension.

    Output position t holds the hidden state after consuming positions 1..t;
    the backward direction scans the axis-reversed input and re-reverses.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if inp.data.ndim != 3:
        raise ShapeError(f"scan input must be (H, W, C), got {inp.shape}")

    x = T.transpose(inp, (1, 0, 2)) if axis == "cols" else inp
    if direction == "backward":
        x = T.flip(x, 0)

    kc = params.w_r.shape[0] // 2
    # Input-side activations for every step at once: each step only meets the
    # center row of the k x k kernels, so a 1 x k convolution over the whole
    # image computes all of them in one pass.
    ax_r = T.conv2d(x, params.w_r[kc:kc + 1], params.b_r)
    ax_z = T.conv2d(x, params.w_z[kc:kc + 1], params.b_z)
    ax_h = T.conv2d(x, params.w_h[kc:kc + 1], params.b_h)
    out = _recurrence_core(ax_r, ax_z, ax_h, params.u_r, params.u_z,
                           params.u_h, masks)

    if direction == "backward":
        out = T.flip(out, 0)
    return T.transpose(out, (1, 0, 2)) if axis == "cols" else out


_SCAN_ARGS = {
    "rows_fwd": ("rows", "forward"),
    "rows_bwd": ("rows", "backward"),
    "cols_fwd": ("cols", "forward"),
    "cols_bwd": ("cols", "backward"),
}


def sample_masks(config: MDGRUConfig, rng: np.random.Generator
                 ) -> tuple[dict[str, dict[str, np.ndarray]], float]:
    """Draw one training step's dropconnect masks and the dropout keep-prob.

    Masks are inverted-scaled Bernoulli (value 1/keep with prob keep), so
    inference needs no rescaling. Draw order is fixed by SCAN_KEYS.
    """
    keep = 1.0 - config.dropout_rate
    scan_masks: dict[str, dict[str, np.ndarray]] = {}
    if config.dropconnect_on_state and config.dropout_rate > 0.0:
        k, ch = config.kernel_size, config.hidden_channels
        for key in SCAN_KEYS:
            scan_masks[key] = {
                name: (rng.random((k, k, ch, ch)) < keep) / keep
                for name in ("u_r", "u_z", "u_h")
            }
    return scan_masks, keep


def mdgru_forward(inp: T.Tensor, config: MDGRUConfig, params: MDGRUParams,
                  training: bool = False,
                  rng: np.random.Generator | int | None = None) -> T.Tensor:
    """Full forward pass: four directional scans, combination, classifier.

    Returns (H, W, num_classes) logits. With training=True the dropconnect
    and dropout masks are drawn from rng; inference consumes no randomness.
    """
    config.validate()
    if inp.data.ndim != 3:
        raise ShapeError(f"expected (H, W, C) input, got {inp.shape}")
    if inp.shape[2] != config.in_channels:
        raise ShapeError(f"model expects {config.in_channels} channels, "
                         f"input has {inp.shape[2]}")

    scan_masks: dict[str, dict[str, np.ndarray]] = {}
    dropout_mask = None
    if training and config.dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("training forward needs an rng for the masks")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        scan_masks, keep = sample_masks(config, rng)
        h, w = inp.shape[:2]
        dropout_mask = (rng.random((h, w, config.combined_channels)) < keep) / keep

    outs = [cgru_scan(inp, params.scans[key], *_SCAN_ARGS[key],
                      masks=scan_masks.get(key)) for key in SCAN_KEYS]
    if config.combine_mode == "concat":
        combined = T.concat(outs, axis=2)
    else:
        combined = T.add(T.add(outs[0], outs[1]), T.add(outs[2], outs[3]))

    if config.residual:
        combined = T.add(combined, T.conv2d(inp, params.res_kernel, params.res_bias))
    if dropout_mask is not None:
        combined = T.mul(combined, T.Tensor(dropout_mask))
    return T.conv2d(combined, params.cls_kernel, params.cls_bias)


def mdgru_backward(loss: T.Tensor) -> None:
    """Accumulate gradients of a scalar loss into every parameter leaf."""
    loss.backward()


# ---------------------------------------------------------------------------
# symmetry helper


def _flip_kernels(p: CGRUParams) -> CGRUParams:
    """Flip the active tap axis of every kernel (axis 1 of the k x k grid)."""
    flip = lambda t: T.Tensor(np.flip(t.data, axis=1).copy(), requires_grad=t.requires_grad)
    return CGRUParams(flip(p.w_r), flip(p.w_z), flip(p.w_h),
                      flip(p.u_r), flip(p.u_z), flip(p.u_h),
                      p.b_r, p.b_z, p.b_h)


def mirrored_params(params: MDGRUParams, axis: int) -> MDGRUParams:
    """Parameter set whose logits on a mirrored image mirror the originals.

    Mirroring image axis `axis` reverses the scan order along that axis
    (handled by swapping its forward/backward parameter sets) and flips each
    perpendicular scan's step inputs, which the gate convolutions see through
    their tap axis (handled by flipping those kernels).
    """
    if axis not in (0, 1):
        raise ConfigError(f"axis must be 0 or 1, got {axis}")
    scans = dict(params.scans)
    if axis == 0:
        scans["rows_fwd"], scans["rows_bwd"] = params.scans["rows_bwd"], params.scans["rows_fwd"]
        scans["cols_fwd"] = _flip_kernels(params.scans["cols_fwd"])
        scans["cols_bwd"] = _flip_kernels(params.scans["cols_bwd"])
        swapped = (0, 1)
    else:
        scans["cols_fwd"], scans["cols_bwd"] = params.scans["cols_bwd"], params.scans["cols_fwd"]
        scans["rows_fwd"] = _flip_kernels(params.scans["rows_fwd"])
        scans["rows_bwd"] = _flip_kernels(params.scans["rows_bwd"])
        swapped = (2, 3)

    cls_kernel, res_kernel, res_bias = params.cls_kernel, params.res_kernel, params.res_bias
    ch = params.scans["rows_fwd"].hidden_channels
    if params.cls_kernel.shape[2] == 4 * ch:
        # concat combination: the swapped scans exchange channel blocks.
        order = np.arange(4)
        order[list(swapped)] = order[list(swapped)][::-1]
        take = np.concatenate([np.arange(b * ch, (b + 1) * ch) for b in order])
        cls_kernel = T.Tensor(params.cls_kernel.data[:, :, take, :].copy(),
                              requires_grad=True)
        if res_kernel is not None:
            res_kernel = T.Tensor(params.res_kernel.data[:, :, :, take].copy(),
                                  requires_grad=True)
            res_bias = T.Tensor(params.res_bias.data[take].copy(), requires_grad=True)
    return replace(params, scans=scans, cls_kernel=cls_kernel,
                   res_kernel=res_kernel, res_bias=res_bias)
