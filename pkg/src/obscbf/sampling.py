"""Uniform epsilon-nets over the augmented box D x D.

A grid with per-axis spacing ``g_i <= 2 eps / sqrt(d)`` puts every point of
the box within half a cell diagonal, i.e. within ``eps``, of a grid node.
:class:`EpsilonGrid` describes that grid without materializing it, which is
enough for covering queries on nets with billions of nodes;
:func:`build_epsilon_net` materializes and labels it.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .systems import Box, RegionSpec

DEFAULT_MAX_SAMPLES = 10_000_000


@dataclass(frozen=True)
class EpsilonGrid:
    lo: np.ndarray
    hi: np.ndarray
    eps: float
    counts: tuple  # nodes per axis

    @classmethod
    def over(cls, box: Box, eps: float):
        if not eps > 0:
            raise ValueError("eps must be positive")
        d = box.dim
        g_max = 2.0 * eps / math.sqrt(d)
        counts = []
        for lo, hi in zip(box.lo, box.hi):
            cells = max(1, math.ceil((hi - lo) / g_max)) if hi > lo else 0
            counts.append(cells + 1)
        grid = cls(box.lo.copy(), box.hi.copy(), float(eps), tuple(counts))
        # guard against rounding pushing the half-diagonal a few ulps past eps
        while grid.covering_radius > eps:
            k = int(np.argmax(grid.spacing))
            counts[k] += 1
            grid = cls(box.lo.copy(), box.hi.copy(), float(eps), tuple(counts))
        return grid

    @property
    def dim(self):
        return len(self.counts)

    @property
    def size(self):
        return math.prod(self.counts)

    @property
    def spacing(self):
        cells = np.maximum(np.array(self.counts) - 1, 1)
        return (self.hi - self.lo) / cells

    @property
    def covering_radius(self):
        """Half the cell diagonal: the worst-case distance to the nearest node."""
        return 0.5 * float(np.linalg.norm(self.spacing))

    def axes(self):
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lo, self.hi, self.counts)]

    def points(self):
        """All nodes, last axis fastest, as a C-contiguous (size, dim) array."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.ascontiguousarray(np.stack([m.reshape(-1) for m in mesh], axis=1))

    def nearest_index(self, probes):
        """Per-axis multi-index of the nearest node (rounding is exact on a product grid)."""
        probes = np.atleast_2d(probes)
        sp = self.spacing
        idx = np.rint((probes - self.lo) / sp).astype(np.int64)
        return np.clip(idx, 0, np.array(self.counts) - 1)

    def node(self, multi_index):
        axes = self.axes()
        multi_index = np.atleast_2d(multi_index)
        return np.stack([axes[k][multi_index[:, k]] for k in range(self.dim)], axis=1)

    def flat_index(self, multi_index):
        return np.ravel_multi_index(tuple(np.atleast_2d(multi_index).T), self.counts)


@dataclass
class Dataset:
    """Labeled epsilon-net over D x D."""

    samples: np.ndarray  # (N, 2n)
    in_init: np.ndarray
    in_unsafe: np.ndarray
    eps: float
    grid: EpsilonGrid
    n: int
    rho: float | None = None

    def __len__(self):
        return self.samples.shape[0]

    @property
    def spacing(self):
        return self.grid.spacing

    def subset(self, which):
        """Samples in X0 x X0 (``"init"``), in the augmented unsafe set
        (``"unsafe"``) or all of them (``"all"``)."""
        if which == "all":
            return self.samples
        if which == "init":
            if not self.in_init.any():
                warnings.warn("no sample lies in X0 x X0; the initial-set condition has no data", stacklevel=2)
            return self.samples[self.in_init]
        if which == "unsafe":
            if not self.in_unsafe.any():
                warnings.warn("no sample lies in the augmented unsafe set", stacklevel=2)
            return self.samples[self.in_unsafe]
        raise ValueError(f"unknown subset {which!r}")

    def to_csv(self, path, header_lines=()):
        n = self.n
        cols = [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)] + ["in_init", "in_unsafe"]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for s, a, b in zip(self.samples, self.in_init, self.in_unsafe):
                w.writerow([repr(float(v)) for v in s] + [int(a), int(b)])


def augmented_box(region: RegionSpec):
    d = region.domain
    return Box(np.concatenate([d.lo, d.lo]), np.concatenate([d.hi, d.hi]))


def epsilon_grid(region: RegionSpec, eps: float, require_below_rho=True):
    rho = region.rho
    if require_below_rho and not eps < rho:
        raise ValueError(f"eps={eps} must be smaller than rho={rho}")
    return EpsilonGrid.over(augmented_box(region), eps)


def build_epsilon_net(region: RegionSpec, eps: float, max_samples=DEFAULT_MAX_SAMPLES, require_below_rho=True):
    """Materialize and label the epsilon-net over D x D.

    ``require_below_rho=False`` admits ``eps >= rho`` for coarse exploratory
    runs; such a net cannot back a validity certificate.
    """
    grid = epsilon_grid(region, eps, require_below_rho)
    if grid.size > max_samples:
        raise ValueError(
            f"epsilon-net would hold {grid.size} samples (cap {max_samples}); increase eps"
        )
    samples = grid.points()
    in_init, in_unsafe = region.membership(samples)
    return Dataset(samples, in_init, in_unsafe, float(eps), grid, region.n, region.rho)
