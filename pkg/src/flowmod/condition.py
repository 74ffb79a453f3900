"""Motion conditioning: flow-derived features and affine feature modulation.

A small conv stack turns a flow field into condition features; two separate
1x1 conv branches map those features to a scale map and a shift map with the
same shape as the RGB feature map they modulate. Both branches start as the
identity (scale 1, shift 0), so a freshly built modulated network computes
exactly what its unmodulated counterpart does until training moves it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nm
from .numerics import Parameter, ShapeError, Tensor

VALID_SITES = ("conv1", "conv2", "conv3", "conv4")


@dataclass(frozen=True)
class ConditionConfig:
    """Layout of the condition stack and of the modulation branches.

    channels: output width of each condition conv (1x1 kernels except the
    last, whose kernel is `last_kernel`). modulate_at: backbone feature maps
    that receive a scale/shift; all sites share one condition stack.
    flow_scale: raw flow values are divided by this before entering the stack.
    """

    channels: tuple[int, ...] = (4, 4, 4, 4)
    last_kernel: str = "3x3"
    modulate_at: tuple[str, ...] = ("conv2",)
    flow_scale: float = 20.0

    def __post_init__(self):
        if not self.channels:
            raise ValueError("condition stack needs at least one conv layer")
        if self.last_kernel not in ("1x1", "3x3"):
            raise ValueError(f"last_kernel must be '1x1' or '3x3', got {self.last_kernel!r}")
        if not self.modulate_at:
            raise ValueError("at least one modulation site is required")
        for site in self.modulate_at:
            if site not in VALID_SITES:
                raise ValueError(f"unknown modulation site {site!r} (valid: {VALID_SITES})")
        if self.flow_scale <= 0:
            raise ValueError("flow_scale must be positive")


@dataclass
class ModulationParams:
    """Per-site affine maps, each shaped like the feature map they modify."""

    beta: Tensor
    gamma: Tensor


def modulate(features: Tensor, params: ModulationParams) -> Tensor:
    """Elementwise scale-and-shift of a feature map: beta * f + gamma."""
    if params.beta.shape != features.shape or params.gamma.shape != features.shape:
        raise ShapeError(
            f"modulation shape mismatch: features {features.shape}, "
            f"beta {params.beta.shape}, gamma {params.gamma.shape}")
    return nm.add(nm.mul(params.beta, features), params.gamma)


class ConditionModule:
    """Condition stack plus per-site scale/shift branches.

    The stack's stride product equals the downsampling factor of the
    shallowest modulated site; deeper sites pick up the remaining factor in
    their (strided 1x1) branch convs, so every scale/shift map lands at the
    resolution of its target feature map.
    """

    def __init__(self, cfg: ConditionConfig, site_channels: Mapping[str, int],
                 site_downsample: Mapping[str, int], seed: int = 0,
                 prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        base_ds = min(site_downsample[s] for s in cfg.modulate_at)
        n_strided = int(round(np.log2(base_ds)))
        if 2 ** n_strided != base_ds:
            raise ValueError(f"site downsampling {base_ds} is not a power of two")
        if n_strided > len(cfg.channels):
            raise ValueError(
                f"condition stack of {len(cfg.channels)} layers cannot reach "
                f"downsampling factor {base_ds}")
        self.base_downsample = base_ds
        # Strides sit on the deepest layers so the early 1x1 convs see every
        # flow pixel at full resolution.
        self.strides = [1] * (len(cfg.channels) - n_strided) + [2] * n_strided
        self.branch_strides = {s: site_downsample[s] // base_ds for s in cfg.modulate_at}
        for site, bs in self.branch_strides.items():
            if bs * base_ds != site_downsample[site]:
                raise ValueError(f"site {site} downsampling not reachable from shared stack")

        self.params: dict[str, Parameter] = {}
        in_ch = 2
        self._kernels: list[int] = []
        for i, out_ch in enumerate(cfg.channels):
            k = 3 if (i == len(cfg.channels) - 1 and cfg.last_kernel == "3x3") else 1
            self._kernels.append(k)
            wname = f"{prefix}condition/layer{i}/weight"
            self._add(wname, nm.he_uniform((out_ch, in_ch, k, k), in_ch * k * k, seed, wname))
            self._add(f"{prefix}condition/layer{i}/bias", np.zeros(out_ch))
            in_ch = out_ch
        self.psi_channels = in_ch
        for site in cfg.modulate_at:
            c = site_channels[site]
            # Identity at init: scale branch outputs 1, shift branch outputs 0.
            self._add(f"{prefix}modulation/{site}/beta/weight", np.zeros((c, in_ch, 1, 1)))
            self._add(f"{prefix}modulation/{site}/beta/bias", np.ones(c))
            self._add(f"{prefix}modulation/{site}/gamma/weight", np.zeros((c, in_ch, 1, 1)))
            self._add(f"{prefix}modulation/{site}/gamma/bias", np.zeros(c))

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Parameter(Tensor(values, requires_grad=True), name)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[self.prefix + name].tensor

    def motion_condition(self, flow: Tensor) -> Tensor:
        """Map a (N,2,H,W) flow tensor to condition features."""
        if flow.shape[-3] != 2:
            raise ShapeError(f"flow tensor must have 2 channels, got shape {flow.shape}")
        h, w = flow.shape[-2], flow.shape[-1]
        if h % self.base_downsample or w % self.base_downsample:
            raise ShapeError(
                f"flow resolution {h}x{w} not divisible by condition stride "
                f"{self.base_downsample}")
        x = nm.mul(flow, 1.0 / self.cfg.flow_scale)
        for i, (k, stride) in enumerate(zip(self._kernels, self.strides)):
            x = nm.conv2d(x, self._p(f"condition/layer{i}/weight"),
                          self._p(f"condition/layer{i}/bias"),
                          stride=stride, pad=(k - 1) // 2)
            x = nm.relu(x)
        return x

    def modulation_params(self, psi: Tensor, site: str) -> ModulationParams:
        """Scale/shift maps for `site` from condition features `psi`."""
        if site not in self.cfg.modulate_at:
            raise ValueError(f"site {site!r} is not configured for modulation")
        if psi.shape[-3] != self.psi_channels:
            raise ShapeError(
                f"condition features have {psi.shape[-3]} channels, expected {self.psi_channels}")
        stride = self.branch_strides[site]
        beta = nm.conv2d(psi, self._p(f"modulation/{site}/beta/weight"),
                         self._p(f"modulation/{site}/beta/bias"), stride=stride)
        gamma = nm.conv2d(psi, self._p(f"modulation/{site}/gamma/weight"),
                          self._p(f"modulation/{site}/gamma/bias"), stride=stride)
        return ModulationParams(beta=beta, gamma=gamma)
