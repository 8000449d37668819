"""Differentiable image manipulators: affine warp, smoothed displacement grid,
and a trainable erase mask.

Every manipulator is differentiable with respect to its own parameters so a
frozen classifier's loss can drive them by gradient descent. Images are
(B, C, H, W) with values in [0, 1]; sampling grids hold normalized source
coordinates in [-1, 1] x [-1, 1] where -1/+1 are the centers of the first and
last pixel of an axis. Values are clamped to [0, 1] only at export, never
inside a differentiable path.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, conv2d, mul, reshape, sigmoid, upsample2d
from .autodiff.tensor import ShapeError, _result

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# -- parameter containers --------------------------------------------------

@dataclass
class AffineParams:
    """Six warp coefficients per image, stored as a residual on the identity
    so synthesis starts from the unmodified image."""

    residual: Tensor  # (B, 6)
    kind: str = field(default="affine", init=False)

    @classmethod
    def identity(cls, batch, dtype=np.float32):
        return cls(residual=Tensor(np.zeros((batch, 6), dtype=dtype), requires_grad=True))

    def theta(self):
        return add(self.residual, Tensor(IDENTITY_THETA.astype(self.residual.dtype)))

    @property
    def trainable(self):
        return self.residual


@dataclass
class DisplacementField:
    """Trainable random field that, after Gaussian smoothing, displaces the
    sampling grid. One independent field per coordinate axis (x and y), each
    smoothed by the same fixed kernel."""

    delta: Tensor  # (B, 2, H, W); channel 0 displaces x, channel 1 displaces y
    kernel: np.ndarray  # fixed for the whole synthesis
    amplitude: float = 0.1
    kind: str = field(default="grid", init=False)

    @classmethod
    def sample(cls, batch, height, width, rng, kernel_size=9, kernel_mu=0.0,
               kernel_sigma=2.0, amplitude=0.1, dtype=np.float32):
        delta = rng.uniform(-1.0, 1.0, size=(batch, 2, height, width)).astype(dtype)
        kernel = gaussian_kernel(kernel_size, kernel_size, kernel_mu, kernel_sigma).astype(dtype)
        return cls(delta=Tensor(delta, requires_grad=True), kernel=kernel, amplitude=amplitude)

    @property
    def trainable(self):
        return self.delta


@dataclass
class EraseMask:
    """N x N trainable mask; after a sigmoid squash it multiplies the image
    blockwise, so cells driven low mark the most classification-relevant
    regions."""

    logits: Tensor  # (B, N, N)
    erase_count: int = 2
    erase_mode: str = "zero"  # or "uniform_noise"
    kind: str = field(default="erase", init=False)

    @classmethod
    def half_open(cls, batch, n=4, erase_count=2, erase_mode="zero", dtype=np.float32):
        # logit 0 -> sigmoid 0.5, so gradients can move cells either way
        return cls(logits=Tensor(np.zeros((batch, n, n), dtype=dtype), requires_grad=True),
                   erase_count=erase_count, erase_mode=erase_mode)

    @property
    def n(self):
        return self.logits.shape[1]

    @property
    def trainable(self):
        return self.logits


ManipulatorParams = AffineParams | DisplacementField | EraseMask


# -- sampling grids ---------------------------------------------------------

@dataclass
class SamplingGrid:
    """Per-pixel source coordinates in normalized space, shape (B, 2, H, W)."""

    coords: Tensor

    @property
    def batch(self):
        return self.coords.shape[0]

    @property
    def height(self):
        return self.coords.shape[2]

    @property
    def width(self):
        return self.coords.shape[3]


def _axis_coords(n, dtype):
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n, dtype=dtype)


def base_grid_arrays(height, width, dtype=np.float64):
    """Normalized (x, y) center coordinates of every pixel, each (H, W)."""
    xs = np.broadcast_to(_axis_coords(width, dtype)[None, :], (height, width))
    ys = np.broadcast_to(_axis_coords(height, dtype)[:, None], (height, width))
    return np.ascontiguousarray(xs), np.ascontiguousarray(ys)


def identity_grid(batch, height, width, dtype=np.float32):
    xs, ys = base_grid_arrays(height, width, dtype)
    coords = np.broadcast_to(np.stack([xs, ys]), (batch, 2, height, width)).copy()
    return SamplingGrid(coords=Tensor(coords))


def affine_grid(theta, width, height):
    """Map every target pixel's normalized coordinates through the 2x3 warp
    matrix, yielding its source coordinates. Differentiable in all six
    coefficients per image.

    ``theta`` is (B, 6) laid out row-major: (t11, t12, t13, t21, t22, t23);
    the source position of target pixel (x, y) is
    (t11*x + t12*y + t13, t21*x + t22*y + t23).
    """
    if width < 1 or height < 1:
        raise ShapeError(f"affine_grid: degenerate size {(width, height)}")
    if theta.data.ndim != 2 or theta.data.shape[1] != 6:
        raise ShapeError(f"affine_grid: theta must be (B, 6), got {theta.data.shape}")
    xs, ys = base_grid_arrays(height, width, theta.dtype)
    t = theta.data[:, :, None, None]  # (B, 6, 1, 1)
    gx = t[:, 0] * xs + t[:, 1] * ys + t[:, 2]
    gy = t[:, 3] * xs + t[:, 4] * ys + t[:, 5]
    coords = np.stack([gx, gy], axis=1)

    def backward(g):
        if theta.requires_grad:
            gx_up, gy_up = g[:, 0], g[:, 1]
            grads = np.stack([
                (gx_up * xs).sum(axis=(1, 2)),
                (gx_up * ys).sum(axis=(1, 2)),
                gx_up.sum(axis=(1, 2)),
                (gy_up * xs).sum(axis=(1, 2)),
                (gy_up * ys).sum(axis=(1, 2)),
                gy_up.sum(axis=(1, 2)),
            ], axis=1)
            theta.accumulate_grad(grads)

    return SamplingGrid(coords=_result(coords, (theta,), "affine_grid", backward))


def gaussian_kernel(width, height, mu, sigma):
    """2-d Gaussian window of odd size, shifted by ``mu`` from the center and
    normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    if width % 2 == 0 or height % 2 == 0:
        raise ValueError(f"kernel sides must be odd, got {(width, height)}")
    di = np.arange(height)[:, None] - height // 2 - mu
    dj = np.arange(width)[None, :] - width // 2 - mu
    k = np.exp(-(di ** 2 + dj ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def smooth_field(fld):
    """Convolve both displacement channels with the field's fixed Gaussian
    kernel (zero-padded, same size). Differentiable in the raw field only."""
    b, two, h, w = fld.delta.shape
    # true convolution: correlate with the flipped kernel
    flipped = fld.kernel[::-1, ::-1].copy()
    weights = Tensor(flipped[None, None].astype(fld.delta.dtype))
    flat = reshape(fld.delta, (b * two, 1, h, w))
    return reshape(conv2d(flat, weights), (b, two, h, w))


def compose_grid(base, mu, amplitude):
    """Displace a sampling grid: coords + amplitude * mu, both axes."""
    if mu.shape != base.coords.shape:
        raise ShapeError(f"compose_grid: field {mu.shape} does not match grid {base.coords.shape}")
    return SamplingGrid(coords=add(base.coords, mul(mu, float(amplitude))))


# -- bilinear sampler -------------------------------------------------------

def grid_sample(image, grid):
    """Bilinearly sample an image at a grid's source coordinates.

    Coordinates are de-normalized to pixel units; positions outside the image
    sample zero. The gradient with respect to a coordinate follows the
    piecewise rule: a pixel column m contributes 0 when |x - m| >= 1, +1 when
    m >= x and -1 when m < x (symmetrically for rows), so behaviour at exact
    integer coordinates is deterministic.
    """
    if image.data.ndim != 4:
        raise ShapeError(f"grid_sample: need (B, C, H, W) image, got {image.data.shape}")
    B, C, H, W = image.data.shape
    if grid.coords.shape != (B, 2, H, W):
        raise ShapeError(f"grid_sample: grid {grid.coords.shape} does not match image {image.data.shape}")
    coords = grid.coords

    px = (coords.data[:, 0].reshape(B, -1) + 1.0) * (W - 1) / 2.0
    py = (coords.data[:, 1].reshape(B, -1) + 1.0) * (H - 1) / 2.0
    m0 = np.floor(px).astype(np.int64)
    n0 = np.floor(py).astype(np.int64)
    tx = px - m0
    ty = py - n0

    flat = image.data.reshape(B, C, H * W)

    def gather(nn, mm):
        valid = ((mm >= 0) & (mm < W) & (nn >= 0) & (nn < H))
        idx = (np.clip(nn, 0, H - 1) * W + np.clip(mm, 0, W - 1))
        vals = np.take_along_axis(flat, idx[:, None, :], axis=2)
        return vals * valid[:, None, :], valid, idx

    v00, ok00, i00 = gather(n0, m0)
    v01, ok01, i01 = gather(n0, m0 + 1)
    v10, ok10, i10 = gather(n0 + 1, m0)
    v11, ok11, i11 = gather(n0 + 1, m0 + 1)

    wx0, wx1 = (1.0 - tx)[:, None, :], tx[:, None, :]
    wy0, wy1 = (1.0 - ty)[:, None, :], ty[:, None, :]
    out = (v00 * wy0 * wx0 + v01 * wy0 * wx1 + v10 * wy1 * wx0 + v11 * wy1 * wx1)

    def backward(g):
        g = g.reshape(B, C, H * W)
        if image.requires_grad:
            dflat = np.zeros_like(flat)
            bidx = np.arange(B)[:, None, None]
            cidx = np.arange(C)[None, :, None]
            for ok, idx, wgt in ((ok00, i00, wy0 * wx0), (ok01, i01, wy0 * wx1),
                                 (ok10, i10, wy1 * wx0), (ok11, i11, wy1 * wx1)):
                np.add.at(dflat, (bidx, cidx, idx[:, None, :]), g * wgt * ok[:, None, :])
            image.accumulate_grad(dflat.reshape(image.data.shape))
        if coords.requires_grad:
            # piecewise subgradient: at tx == 0 the left neighbour (m >= x)
            # takes +1 and the right neighbour leaves the |x - m| < 1 band
            at_node_x = (tx == 0.0)[:, None, :]
            at_node_y = (ty == 0.0)[:, None, :]
            sx0 = np.where(at_node_x, 1.0, -1.0)
            sx1 = np.where(at_node_x, 0.0, 1.0)
            sy0 = np.where(at_node_y, 1.0, -1.0)
            sy1 = np.where(at_node_y, 0.0, 1.0)
            dpx = (g * (wy0 * (sx0 * v00 + sx1 * v01) + wy1 * (sx0 * v10 + sx1 * v11))).sum(axis=1)
            dpy = (g * (wx0 * (sy0 * v00 + sy1 * v10) + wx1 * (sy0 * v01 + sy1 * v11))).sum(axis=1)
            dg = np.stack([dpx * (W - 1) / 2.0, dpy * (H - 1) / 2.0], axis=1)
            coords.accumulate_grad(dg.reshape(coords.data.shape))

    return _result(out.reshape(image.data.shape), (image, coords), "grid_sample", backward)


# -- smart erasing ----------------------------------------------------------

def erase_forward(image, mask):
    """Multiply the image by the sigmoid-squashed mask, upsampled to image
    size (broadcast over channels). Differentiable in the mask logits."""
    B, C, H, W = image.data.shape
    n = mask.n
    if H % n or W % n:
        raise ShapeError(f"erase_forward: mask side {n} must divide image size {(H, W)}")
    if mask.logits.shape != (B, n, n):
        raise ShapeError(f"erase_forward: mask {mask.logits.shape} does not match batch of {image.data.shape}")
    squashed = sigmoid(reshape(mask.logits, (B, 1, n, n)))
    grid = upsample2d(squashed, (H // n, W // n))
    return mul(image, grid)


def erase_apply(image, mask, rng=None):
    """Erase the ``erase_count`` blocks whose trained mask cells rank lowest,
    replacing them with zeros or uniform noise. Plain array in, plain array
    out; nothing here is differentiable."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    B, C, H, W = arr.shape
    n = mask.n
    if mask.erase_count > n * n:
        raise ValueError(f"erase_count {mask.erase_count} exceeds {n}x{n} mask")
    if mask.erase_mode not in ("zero", "uniform_noise"):
        raise ValueError(f"unknown erase_mode {mask.erase_mode!r}")
    bh, bw = H // n, W // n
    out = arr.copy()
    values = mask.logits.data.reshape(B, n * n)
    for b in range(B):
        for cell in np.argsort(values[b], kind="stable")[:mask.erase_count]:
            r, c = divmod(int(cell), n)
            block = np.s_[b, :, r * bh:(r + 1) * bh, c * bw:(c + 1) * bw]
            if mask.erase_mode == "zero":
                out[block] = 0.0
            else:
                out[block] = rng.uniform(0.0, 1.0, size=out[block].shape)
    return out[0] if squeeze else out


# -- dispatch ---------------------------------------------------------------

def apply_manipulator(x, params, rng=None):
    """Route an image batch through the pipeline its parameters select,
    producing the manipulated batch (same shape, gradients into ``params``)."""
    img = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    squeeze = img.data.ndim == 3
    if squeeze:
        img = Tensor(img.data[None], requires_grad=img.requires_grad)
    B, C, H, W = img.data.shape

    if isinstance(params, AffineParams):
        out = grid_sample(img, affine_grid(params.theta(), W, H))
    elif isinstance(params, DisplacementField):
        mu = smooth_field(params)
        grid = compose_grid(identity_grid(B, H, W, dtype=img.dtype), mu, params.amplitude)
        out = grid_sample(img, grid)
    elif isinstance(params, EraseMask):
        out = erase_forward(img, params)
    else:
        raise TypeError(f"not a manipulator parameter set: {type(params).__name__}")
    return reshape(out, (C, H, W)) if squeeze else out


def init_params(kind, batch, height, width, rng, cfg=None, dtype=np.float32):
    """Fresh parameters for one synthesis run of ``kind`` over a batch."""
    cfg = cfg or {}
    if kind == "affine":
        return AffineParams.identity(batch, dtype=dtype)
    if kind == "grid":
        return DisplacementField.sample(
            batch, height, width, rng,
            kernel_size=cfg.get("kernel_size", 9),
            kernel_mu=cfg.get("kernel_mu", 0.0),
            kernel_sigma=cfg.get("kernel_sigma", 2.0),
            amplitude=cfg.get("amplitude", 0.1),
            dtype=dtype,
        )
    if kind == "erase":
        return EraseMask.half_open(
            batch,
            n=cfg.get("mask_n", 4),
            erase_count=cfg.get("erase_count", 2),
            erase_mode=cfg.get("erase_mode", "zero"),
            dtype=dtype,
        )
    raise ValueError(f"unknown manipulator kind {kind!r}")


MANIPULATOR_KINDS = ("affine", "grid", "erase")
