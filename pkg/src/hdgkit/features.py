"""The four histogram feature families and their concatenation.

Shared conventions, chosen once and used identically everywhere:

* Subvolume cells: axis of length L split into k cells by ``cell = p * k // L``
  so every coordinate lands in exactly one cell and the cells tile the volume.
  Cells are flattened x-fastest, then y, then t.
* Histogram bins: B uniform bins over the observed [lo, hi] of the quantity,
  ``bin = floor((v - lo) * B / (hi - lo))`` with v == hi folded into the last
  bin. A degenerate range (lo == hi) puts all mass in bin 0.
* Every non-empty histogram is L1-normalized; empty ones stay exactly zero.
* Background voxels (depth 0, or masked out) never enter a histogram nor the
  global [lo, hi] ranges.
"""
from __future__ import annotations

import numpy as np

from .core import (
    ActionSample,
    DepthSequence,
    FeatureLayout,
    FeatureVector,
    HdgConfig,
    SkeletonSequence,
    layout_from_config,
)


def bin_index(values: np.ndarray, lo: float, hi: float, nbins: int) -> np.ndarray:
    """Uniform bin index per value; degenerate range maps everything to bin 0."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) * nbins / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, nbins - 1)


def cell_index(coords: np.ndarray, length: int, ncells: int) -> np.ndarray:
    """Subvolume cell per coordinate in [0, length)."""
    return np.asarray(coords, dtype=np.int64) * ncells // length


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    """L1-normalize each row that has any mass; empty rows stay zero."""
    out = counts.astype(np.float64)
    sums = out.sum(axis=1)
    nonzero = sums > 0
    out[nonzero] /= sums[nonzero, None]
    return out


def _foreground_coords(depth: DepthSequence):
    fg = depth.foreground()
    t, y, x = np.nonzero(fg)
    return t, y, x


def _flat_cells(depth: DepthSequence, t, y, x, grid) -> np.ndarray:
    nx, ny, nt = grid
    cx = cell_index(x, depth.width, nx)
    cy = cell_index(y, depth.height, ny)
    ct = cell_index(t, depth.num_frames, nt)
    return cx + nx * (cy + ny * ct)


def compute_hod(depth: DepthSequence, config: HdgConfig, normalize: bool = True) -> np.ndarray:
    """Per-subvolume histograms of raw depth over the clip-global depth range.

    Returns nx*ny*nt*hod_bins values; a clip with no foreground voxels gives
    an all-zero vector.
    """
    nx, ny, nt = config.grid
    nbins = config.hod_bins
    ncells = nx * ny * nt
    t, y, x = _foreground_coords(depth)
    if t.size == 0:
        return np.zeros(ncells * nbins)
    vals = depth.frames[t, y, x].astype(np.float64)
    bins = bin_index(vals, float(vals.min()), float(vals.max()), nbins)
    cells = _flat_cells(depth, t, y, x, config.grid)
    counts = np.bincount(cells * nbins + bins, minlength=ncells * nbins)
    counts = counts.reshape(ncells, nbins)
    if normalize:
        return _normalize_rows(counts).ravel()
    return counts.astype(np.float64).ravel()


def _gradient(frames: np.ndarray, axis: int) -> np.ndarray:
    """Central differences, one-sided at the boundaries; zero if the axis is
    too short for any finite difference."""
    if frames.shape[axis] < 2:
        return np.zeros_like(frames)
    return np.gradient(frames, axis=axis, edge_order=1)


def compute_hodg(depth: DepthSequence, config: HdgConfig, normalize: bool = True) -> np.ndarray:
    """Per-subvolume histograms of depth derivatives along x, y and t.

    Each channel gets its own bin count and its own clip-global derivative
    range; per subvolume the three channel histograms are concatenated as
    (x | y | t). An axis of length 1 (e.g. a single-frame clip for the
    temporal channel) has no derivative samples at all, so that channel's
    histograms stay exactly zero.
    """
    nx, ny, nt = config.grid
    bins_per_channel = config.hodg_bins_per_channel
    ncells = nx * ny * nt
    block = sum(bins_per_channel)
    out = np.zeros((ncells, block))
    t, y, x = _foreground_coords(depth)
    if t.size == 0:
        return out.ravel()
    frames = depth.frames.astype(np.float64)
    cells = _flat_cells(depth, t, y, x, config.grid)
    # channel order (x, y, t) = frame axes (2, 1, 0)
    offset = 0
    for axis, nbins in zip((2, 1, 0), bins_per_channel):
        if frames.shape[axis] >= 2:
            deriv = _gradient(frames, axis)[t, y, x]
            bins = bin_index(deriv, float(deriv.min()), float(deriv.max()), nbins)
            counts = np.bincount(cells * nbins + bins, minlength=ncells * nbins)
            counts = counts.reshape(ncells, nbins)
            if normalize:
                out[:, offset:offset + nbins] = _normalize_rows(counts)
            else:
                out[:, offset:offset + nbins] = counts
        offset += nbins
    return out.ravel()


def compute_jpd(skel: SkeletonSequence, config: HdgConfig, normalize: bool = True) -> np.ndarray:
    """Histograms of per-frame joint offsets from the reference joint.

    One histogram per spatial component (x, y, z/depth), pooled over all
    frames and all non-reference joints, each over that component's observed
    range. Returns 3 * jpd_bins_per_component values as (x | y | z).
    """
    if skel.num_joints < 2:
        raise ValueError("jpd needs at least 2 joints (one besides the reference)")
    nbins = config.jpd_bins_per_component
    pos = skel.positions()
    ref = skel.reference_joint_index
    others = [j for j in range(skel.num_joints) if j != ref]
    delta = pos[:, others, :] - pos[:, ref:ref + 1, :]
    out = np.zeros((3, nbins))
    for comp in range(3):
        vals = delta[:, :, comp].ravel()
        bins = bin_index(vals, float(vals.min()), float(vals.max()), nbins)
        counts = np.bincount(bins, minlength=nbins)[None, :]
        out[comp] = _normalize_rows(counts)[0] if normalize else counts[0]
    return out.ravel()


def compute_jmv(skel: SkeletonSequence, config: HdgConfig) -> np.ndarray:
    """Per-joint movement volume and extreme positions over temporal cells.

    Frames are split into ct temporal cells (cell = t * ct // T); cx/cy > 1
    additionally split each temporal cell by the joint's own x/y bounding box.
    Each cell yields 6 values:

        (volume, x_min, x_max, y_min, y_max, z_range)

    where volume is the product of the joint's x/y/z extents in the cell, the
    x/y extremes are taken relative to the reference joint's mean position
    over the temporal cell, and z_range = z_max - z_min. Cells with no frames
    are all zeros. Output is J * 6 * cx * cy * ct values, joints outermost,
    cells flattened x-fastest then y then t.
    """
    cx, cy, ct = config.jmv_cells
    T = skel.num_frames
    pos = skel.positions()
    ref_pos = pos[:, skel.reference_joint_index, :]
    tcells = cell_index(np.arange(T), T, ct)
    ncells = cx * cy * ct
    out = np.zeros((skel.num_joints, ncells, 6))
    for tc in range(ct):
        in_cell = tcells == tc
        if not in_cell.any():
            continue
        ref_mean = ref_pos[in_cell].mean(axis=0)
        for j in range(skel.num_joints):
            pts = pos[in_cell, j, :]
            if cx == 1 and cy == 1:
                groups = [(0, pts)]
            else:
                xlo, xhi = float(pts[:, 0].min()), float(pts[:, 0].max())
                ylo, yhi = float(pts[:, 1].min()), float(pts[:, 1].max())
                sx = bin_index(pts[:, 0], xlo, xhi, cx)
                sy = bin_index(pts[:, 1], ylo, yhi, cy)
                flat = sx + cx * sy
                groups = [(s, pts[flat == s]) for s in range(cx * cy)]
            for s, sub in groups:
                if sub.shape[0] == 0:
                    continue
                mins = sub.min(axis=0)
                maxs = sub.max(axis=0)
                ext = maxs - mins
                out[j, s + cx * cy * tc] = (
                    ext[0] * ext[1] * ext[2],
                    mins[0] - ref_mean[0],
                    maxs[0] - ref_mean[0],
                    mins[1] - ref_mean[1],
                    maxs[1] - ref_mean[1],
                    ext[2],
                )
    return out.ravel()


_COMPONENT_NEEDS = {"hod": "depth", "hodg": "depth", "jpd": "skeleton", "jmv": "skeleton"}


def extract_hdg(sample: ActionSample, config: HdgConfig) -> FeatureVector:
    """Concatenate the enabled feature families for one sample.

    Raises if an enabled component's modality is missing from the sample.
    """
    for name in config.ordered_components():
        modality = _COMPONENT_NEEDS[name]
        if getattr(sample, modality) is None:
            raise ValueError(
                f"sample {sample.sample_id!r} has no {modality} data, required by component {name!r}"
            )
    num_joints = sample.skeleton.num_joints if sample.skeleton is not None else 1
    layout = layout_from_config(config, num_joints)
    parts = []
    for name in config.ordered_components():
        if name == "hod":
            parts.append(compute_hod(sample.depth, config))
        elif name == "hodg":
            parts.append(compute_hodg(sample.depth, config))
        elif name == "jpd":
            parts.append(compute_jpd(sample.skeleton, config))
        else:
            parts.append(compute_jmv(sample.skeleton, config))
    values = np.concatenate(parts)
    assert values.size == layout.total_length
    return FeatureVector(values, layout)


def feature_column_names(layout: FeatureLayout) -> list[str]:
    """Column names "segment:index" matching the layout order."""
    names = []
    for seg in layout.segments:
        names.extend(f"{seg.name}:{i}" for i in range(seg.length))
    return names


def write_feature_matrix(path, sample_ids, vectors: list[FeatureVector]) -> None:
    """CSV dump: header of segment:index columns, one row per sample."""
    if len(sample_ids) != len(vectors):
        raise ValueError("one feature vector per sample id required")
    if not vectors:
        raise ValueError("nothing to write: no feature vectors")
    layout = vectors[0].layout
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id," + ",".join(feature_column_names(layout)) + "\n")
        for sid, vec in zip(sample_ids, vectors):
            if vec.layout != layout:
                raise ValueError(f"sample {sid!r} has a different feature layout")
            fh.write(str(sid) + "," + ",".join(f"{v:.10g}" for v in vec.values) + "\n")
