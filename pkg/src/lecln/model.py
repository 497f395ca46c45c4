"""LE-CLN: pilot and LiDAR feature extraction, attention-weighted fusion,
pilot-position reconstruction and CNN interpolation across subcarriers.

Two coordinate conventions keep the learning problem translation free.  The
projected pilot tensor is rolled along its grid axis so the user's dense
codebook window always starts at the same row, and the regression target is
the pilot-position channel counter-rotated by the user's coarse steering
value (``diag(exp(+j i theta_k)) H_P``).  Both transforms are undone exactly at
inference, so the model still maps observations to antenna-domain CSI.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import nn
from .nn import TrainConfig, affine, conv2d, relu, sigmoid

log = logging.getLogger(__name__)

VARIANTS = ("full", "uni_pilot", "lidar_only", "no_afwc")
# divisors for the range, label and path-loss channels of the SP-feature crop
IMG_SCALE = (100.0, 2.0, 100.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float, last_good: Optional[dict] = None):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss = {loss}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.last_good = last_good


@dataclass(frozen=True)
class ModelDims:
    D: int = 64
    N_P: int = 8
    N_t: int = 32
    K_P: int = 8
    N_s: int = 64
    crop_h: int = 64
    crop_w: int = 128
    F: int = 256
    pcf_ch: tuple[int, int] = (16, 32)
    lcf_ch: tuple[int, ...] = (8, 16, 32, 32, 32)
    afwc_hidden: int = 128
    mlp_hidden: int = 1024
    ci_ch: tuple[int, ...] = (16, 32, 64, 32, 16)

    @property
    def dense_row(self) -> int:
        """Row where the user's dense codebook window starts after alignment."""
        return self.D // 4

    def pcf_flat(self) -> int:
        h = nn.conv_out_size(self.D, 3, 2, 1)
        w = nn.conv_out_size(self.N_P, 3, 2, 1)
        return self.pcf_ch[1] * h * w

    def lcf_flat(self) -> int:
        h, w = self.crop_h, self.crop_w
        for _ in self.lcf_ch[1:]:
            h, w = nn.conv_out_size(h, 3, 2, 1), nn.conv_out_size(w, 3, 2, 1)
        return self.lcf_ch[-1] * h * w


def _conv_param(p, name, c_out, c_in, gen, dtype):
    p[f"{name}.weight"] = nn.glorot_uniform((c_out, c_in, 3, 3), gen, dtype)
    p[f"{name}.bias"] = torch.zeros(c_out, dtype=dtype)


def _fc_param(p, name, n_out, n_in, gen, dtype):
    p[f"{name}.weight"] = nn.glorot_uniform((n_out, n_in), gen, dtype)
    p[f"{name}.bias"] = torch.zeros(n_out, dtype=dtype)


def _conv(p, name, x, stride=1):
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=1)


def _fc(p, name, x):
    return affine(x, p[f"{name}.weight"], p[f"{name}.bias"])


# --- blocks -------------------------------------------------------------------

def pcf_extract(p, y: torch.Tensor) -> torch.Tensor:
    """Pilot feature q_P from projected pilots of shape (B, 2, D, N_P)."""
    h = relu(_conv(p, "pcf.conv1", y))
    h = relu(_conv(p, "pcf.conv2", h, stride=2))
    return _fc(p, "pcf.proj", h.flatten(1))


def lcf_extract(p, img: torch.Tensor) -> torch.Tensor:
    """LiDAR feature q_L from an SP-feature crop of shape (B, 3, h, w)."""
    h = relu(_conv(p, "lcf.conv1", img))
    for i in range(2, 6):
        h = relu(_conv(p, f"lcf.conv{i}", h, stride=2))
    return _fc(p, "lcf.proj", h.flatten(1))


@dataclass
class WeightedFeature:
    w: torch.Tensor
    q_w: torch.Tensor


def afwc(p, q_P: torch.Tensor, q_L: torch.Tensor) -> WeightedFeature:
    if q_P.shape != q_L.shape:
        raise ValueError(f"feature pair length mismatch: {tuple(q_P.shape)} vs {tuple(q_L.shape)}")
    q = nn.concat([q_P, q_L])
    h = relu(_fc(p, "afwc.fc1", q))
    h = relu(_fc(p, "afwc.fc2", h))
    w = sigmoid(_fc(p, "afwc.fc3", h))
    return WeightedFeature(w=w, q_w=nn.hadamard(q, w))


def reconstruct_pilot_csi(p, q_w: torch.Tensor, N_t: int, K_P: int) -> torch.Tensor:
    """MLP_P: returns real/imag planes of shape (B, 2, N_t, K_P)."""
    h = relu(_fc(p, "mlp.fc1", q_w))
    out = _fc(p, "mlp.fc2", h)
    return out.view(-1, 2, N_t, K_P)


def zero_pad(H_P_hat, V_k: Sequence[int], N_s: int):
    """Place pilot-position columns at 1-based subcarriers ``V_k``; all others exactly zero."""
    idx = np.asarray(V_k, dtype=np.int64) - 1
    if H_P_hat.shape[-1] != len(idx):
        raise ValueError(f"{H_P_hat.shape[-1]} pilot columns for {len(idx)} indices")
    if len(idx) and (idx.min() < 0 or idx.max() >= N_s):
        raise IndexError(f"pilot index outside 1..{N_s}")
    if isinstance(H_P_hat, torch.Tensor):
        out = torch.zeros(*H_P_hat.shape[:-1], N_s, dtype=H_P_hat.dtype)
        out[..., torch.as_tensor(idx)] = H_P_hat
        return out
    H_P_hat = np.asarray(H_P_hat)
    out = np.zeros(H_P_hat.shape[:-1] + (N_s,), dtype=H_P_hat.dtype)
    out[..., idx] = H_P_hat
    return out


def ci_input(V_r) -> np.ndarray:
    """Real, imaginary and phase planes of a zero-padded channel; phase of 0 is 0."""
    V_r = np.asarray(V_r)
    phase = np.where(V_r != 0, np.angle(V_r), 0.0) / math.pi
    return np.stack([V_r.real, V_r.imag, phase], axis=-3).astype(np.float32)


def ci_cnn(p, x: torch.Tensor) -> torch.Tensor:
    """Six 3x3 same-padded conv layers, (B, 3, N_t, N_s) -> (B, 2, N_t, N_s)."""
    h = x
    for i in range(1, 6):
        h = relu(_conv(p, f"ci.conv{i}", h))
    return _conv(p, "ci.conv6", h)


# --- models -------------------------------------------------------------------

class LeCln:
    """Stage-A network: PCF-CNN, LCF-CNN, AFWC and MLP_P.

    ``variant`` selects the ablations: ``uni_pilot`` zeroes the LiDAR feature,
    ``lidar_only`` zeroes the pilot feature and ``no_afwc`` fixes all weights
    to one.
    """

    def __init__(self, dims: ModelDims = ModelDims(), variant: str = "full", seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.dims = dims
        self.variant = variant
        self.dtype = dtype
        gen = torch.Generator().manual_seed(seed)
        p = OrderedDict()
        c1, c2 = dims.pcf_ch
        _conv_param(p, "pcf.conv1", c1, 2, gen, dtype)
        _conv_param(p, "pcf.conv2", c2, c1, gen, dtype)
        _fc_param(p, "pcf.proj", dims.F, dims.pcf_flat(), gen, dtype)
        chans = (3,) + tuple(dims.lcf_ch)
        for i in range(5):
            _conv_param(p, f"lcf.conv{i + 1}", chans[i + 1], chans[i], gen, dtype)
        _fc_param(p, "lcf.proj", dims.F, dims.lcf_flat(), gen, dtype)
        _fc_param(p, "afwc.fc1", dims.afwc_hidden, 2 * dims.F, gen, dtype)
        _fc_param(p, "afwc.fc2", dims.afwc_hidden, dims.afwc_hidden, gen, dtype)
        _fc_param(p, "afwc.fc3", 2 * dims.F, dims.afwc_hidden, gen, dtype)
        _fc_param(p, "mlp.fc1", dims.mlp_hidden, 2 * dims.F, gen, dtype)
        _fc_param(p, "mlp.fc2", 2 * dims.N_t * dims.K_P, dims.mlp_hidden, gen, dtype)
        self.params = p
        self.y_scale = 1.0

    def parameters(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def forward(self, y: torch.Tensor, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pilot-position planes (B, 2, N_t, K_P) and AFWC weights (B, 2F)."""
        p = self.params
        B = y.shape[0]
        if self.variant == "lidar_only":
            q_P = torch.zeros(B, self.dims.F, dtype=self.dtype)
        else:
            q_P = pcf_extract(p, y)
        if self.variant == "uni_pilot":
            q_L = torch.zeros(B, self.dims.F, dtype=self.dtype)
        else:
            q_L = lcf_extract(p, img)
        if self.variant == "no_afwc":
            q = nn.concat([q_P, q_L])
            wf = WeightedFeature(w=torch.ones_like(q), q_w=q)
        else:
            wf = afwc(p, q_P, q_L)
        return reconstruct_pilot_csi(p, wf.q_w, self.dims.N_t, self.dims.K_P), wf.w


class CiCnn:
    """Stage-B network interpolating zero-padded pilot CSI across subcarriers."""

    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0, dtype: torch.dtype = torch.float32):
        self.dims = dims
        self.dtype = dtype
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(dims.ci_ch) + (2,)
        p = OrderedDict()
        for i in range(6):
            _conv_param(p, f"ci.conv{i + 1}", chans[i + 1], chans[i], gen, dtype)
        self.params = p

    def parameters(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ci_cnn(self.params, x)


# --- frames and data preparation -------------------------------------------------

def align_rows(y: np.ndarray, o1: np.ndarray, dense_row: int) -> np.ndarray:
    """Roll each sample's grid axis (axis -2) so its dense window starts at ``dense_row``."""
    y = np.asarray(y)
    o1 = np.broadcast_to(np.asarray(o1, dtype=np.int64), y.shape[:1])
    out = np.empty_like(y)
    for i in range(len(y)):
        out[i] = np.roll(y[i], dense_row - int(o1[i]), axis=-2)
    return out


def derotate(H: np.ndarray, theta_k) -> np.ndarray:
    """Multiply antenna row i by exp(+j i theta_k); moves steering theta_k to zero.

    ``H`` is (..., N_t, C) and ``theta_k`` a scalar or one value per leading index.
    """
    H = np.asarray(H)
    theta = np.asarray(theta_k, dtype=float)
    ph = np.exp(1j * theta[..., None] * np.arange(H.shape[-2]))
    return H * ph[..., None]


def rotate(H: np.ndarray, theta_k) -> np.ndarray:
    return derotate(H, -np.asarray(theta_k, dtype=float))


def planes(H: np.ndarray) -> np.ndarray:
    return np.stack([H.real, H.imag], axis=-3).astype(np.float32)


def from_planes(x) -> np.ndarray:
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return x[..., 0, :, :].astype(np.float64) + 1j * x[..., 1, :, :].astype(np.float64)


def scale_image(img: np.ndarray) -> np.ndarray:
    s = np.asarray(IMG_SCALE, dtype=np.float32).reshape(3, 1, 1)
    return (np.asarray(img, dtype=np.float32) / s).astype(np.float32)


@dataclass
class StageAInputs:
    y: torch.Tensor
    img: torch.Tensor
    target: Optional[torch.Tensor] = None


def prepare_stage_a(model: LeCln, y: np.ndarray, img: np.ndarray, o1: np.ndarray, theta_k: np.ndarray,
                    H_P: Optional[np.ndarray] = None) -> StageAInputs:
    ya = align_rows(y, o1, model.dims.dense_row) / model.y_scale
    target = None
    if H_P is not None:
        target = torch.from_numpy(planes(derotate(H_P, theta_k))).to(model.dtype)
    return StageAInputs(y=torch.from_numpy(ya.astype(np.float32)).to(model.dtype),
                        img=torch.from_numpy(scale_image(img)).to(model.dtype), target=target)


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    adam: Optional[nn.AdamState] = None
    epoch: int = 0


def _snapshot(params) -> dict:
    return {k: v.detach().clone() for k, v in params.items()}


def fit(params: "OrderedDict[str, torch.Tensor]", batch_loss: Callable[[torch.Tensor], torch.Tensor],
        n_train: int, cfg: TrainConfig, val_loss: Optional[Callable[[], float]] = None,
        adam: Optional[nn.AdamState] = None, start_epoch: int = 0,
        on_epoch: Optional[Callable[[int, TrainResult], None]] = None) -> TrainResult:
    """Mini-batch Adam over ``n_train`` samples following ``cfg``.

    The batch order of epoch ``e`` depends only on ``(cfg.seed, e)``, so a
    resumed run replays the same sequence as an uninterrupted one.
    """
    plist = list(params.values())
    for t in plist:
        t.requires_grad_(True)
    adam = adam or nn.AdamState.zeros_like(plist)
    res = TrainResult(adam=adam, epoch=start_epoch)
    last_good = _snapshot(params)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = nn.lr_at(epoch, cfg)
            gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
            perm = torch.randperm(n_train, generator=gen)
            total = 0.0
            for b, start in enumerate(range(0, n_train, cfg.batch_size)):
                idx = perm[start:start + cfg.batch_size]
                loss = batch_loss(idx)
                value = loss.item()
                if not math.isfinite(value):
                    with torch.no_grad():
                        for k, t in params.items():
                            t.copy_(last_good[k])
                    raise TrainingDiverged(epoch, b, value, last_good)
                grads = nn.backward(loss, plist)
                adam = nn.adam_step(plist, grads, adam, adam.t + 1, lr, cfg.beta1, cfg.beta2, cfg.eps)
                total += value * len(idx)
            row = dict(epoch=epoch, lr=lr, train_loss=total / n_train,
                       val_loss=val_loss() if val_loss is not None else float("nan"))
            res.history.append(row)
            res.adam = adam
            res.epoch = epoch + 1
            last_good = _snapshot(params)
            log.info("epoch %d lr %.3g train %.5g val %.5g", epoch, lr, row["train_loss"], row["val_loss"])
            if on_epoch is not None:
                on_epoch(epoch, res)
    finally:
        for t in plist:
            t.requires_grad_(False)
    return res


def _batched_loss(model_fn, inputs: list[torch.Tensor], target: torch.Tensor, batch: int = 256) -> float:
    total = 0.0
    n = len(target)
    with torch.no_grad():
        for s in range(0, n, batch):
            pred = model_fn(*[x[s:s + batch] for x in inputs])
            total += nn.mse(pred, target[s:s + batch]).item() * len(pred)
    return total / max(n, 1)


def train_stage_a(model: LeCln, train: StageAInputs, cfg: TrainConfig, val: Optional[StageAInputs] = None,
                  **kw) -> TrainResult:
    """MSE between MLP_P output and the (counter-rotated) pilot-position channel."""
    if train.target is None:
        raise ValueError("stage A needs pilot-position targets")

    def batch_loss(idx):
        pred, _ = model.forward(train.y[idx], train.img[idx])
        return nn.mse(pred, train.target[idx])

    val_fn = None
    if val is not None and len(val.y):
        val_fn = lambda: _batched_loss(lambda y, i: model.forward(y, i)[0], [val.y, val.img], val.target)
    return fit(model.params, batch_loss, len(train.y), cfg, val_fn, **kw)


def train_stage_b(model: CiCnn, x: torch.Tensor, target: torch.Tensor, cfg: TrainConfig,
                  val: Optional[tuple[torch.Tensor, torch.Tensor]] = None, **kw) -> TrainResult:
    """MSE training of the CI-CNN on (zero-padded pilot CSI, full CSI) pairs."""

    def batch_loss(idx):
        return nn.mse(model.forward(x[idx]), target[idx])

    val_fn = None
    if val is not None and len(val[0]):
        val_fn = lambda: _batched_loss(model.forward, [val[0]], val[1])
    return fit(model.params, batch_loss, len(x), cfg, val_fn, **kw)


def stage_b_tensors(H: np.ndarray, users: np.ndarray, pilot_sets: dict, dtype=torch.float32):
    """CI-CNN inputs from ground-truth channels sampled at each user's pilot subcarriers."""
    N_s = H.shape[-1]
    V = np.stack([zero_pad(H[i][:, np.asarray(pilot_sets[int(k)]) - 1], pilot_sets[int(k)], N_s)
                  for i, k in enumerate(users)]) if len(H) else np.zeros_like(H)
    x = torch.from_numpy(ci_input(V)).to(dtype)
    t = torch.from_numpy(planes(H)).to(dtype)
    return x, t


# --- inference --------------------------------------------------------------------

@dataclass
class LeClnEstimate:
    H: np.ndarray  # (B, N_t, N_s)
    H_P: np.ndarray  # (B, N_t, K_P)
    w: np.ndarray  # (B, 2F)

    def pilot_weight(self) -> np.ndarray:
        """Mean AFWC weight over the pilot half-block per sample."""
        return self.w[:, : self.w.shape[1] // 2].mean(axis=1)


def estimate(model: LeCln, ci: CiCnn, y: np.ndarray, img: np.ndarray, o1, theta_k, pilot_sets: Sequence) -> LeClnEstimate:
    """Chain both stages: observations -> pilot-position CSI -> full-band CSI."""
    inp = prepare_stage_a(model, y, img, o1, theta_k)
    with torch.no_grad():
        out, w = model.forward(inp.y, inp.img)
    H_P = rotate(from_planes(out), theta_k)
    N_s = model.dims.N_s
    V = np.stack([zero_pad(H_P[i], pilot_sets[i], N_s) for i in range(len(H_P))])
    with torch.no_grad():
        full = ci.forward(torch.from_numpy(ci_input(V)).to(ci.dtype))
    return LeClnEstimate(H=from_planes(full), H_P=H_P, w=w.detach().cpu().numpy().astype(np.float64))
