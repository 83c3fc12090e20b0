"""Shared domain types: depth clips, skeletons, feature layouts and run settings.

Everything here is a plain immutable container with validation; no I/O and no
learning logic. Arrays are frozen (non-writeable) after construction so values
can be shared freely between threads and cached without copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

# Canonical concatenation order of the four feature families.
COMPONENT_ORDER = ("hod", "hodg", "jpd", "jmv")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DepthSequence:
    """One action clip of depth samples, shape T x H x W, values in millimeters.

    Depth 0 marks invalid/background pixels. An optional boolean mask of the
    same shape restricts the foreground further; a voxel is foreground iff
    depth > 0 and (mask is None or mask is True there).
    """

    frames: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or min(frames.shape) < 1:
            raise ValueError(f"frames must be T x H x W with all dims >= 1, got shape {frames.shape}")
        if not np.issubdtype(frames.dtype, np.integer):
            raise ValueError(f"depth values must be integers (millimeters), got dtype {frames.dtype}")
        if frames.min(initial=0) < 0:
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "frames", _freeze(frames.astype(np.uint16, copy=False)))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != frames.shape:
                raise ValueError(f"mask shape {mask.shape} != frames shape {frames.shape}")
            object.__setattr__(self, "mask", _freeze(mask))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def foreground(self) -> np.ndarray:
        """Boolean T x H x W array of voxels that enter the histograms."""
        fg = self.frames > 0
        if self.mask is not None:
            fg &= self.mask
        return fg


@dataclass(frozen=True)
class SkeletonSequence:
    """Per-frame 3D joints, shape T x J x 4 as (x, y, z, confidence).

    Low-confidence joints are kept as-is; nothing here drops or interpolates
    them. ``reference_joint_index`` names the joint (typically the torso) that
    position-difference features are measured against.
    """

    joints: np.ndarray
    reference_joint_index: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.ndim != 3 or joints.shape[2] != 4:
            raise ValueError(f"joints must be T x J x 4, got shape {joints.shape}")
        if joints.shape[0] < 1 or joints.shape[1] < 1:
            raise ValueError("need at least one frame and one joint")
        if not np.isfinite(joints).all():
            raise ValueError("joint values must be finite")
        if not 0 <= self.reference_joint_index < joints.shape[1]:
            raise ValueError(
                f"reference_joint_index {self.reference_joint_index} out of range for {joints.shape[1]} joints"
            )
        object.__setattr__(self, "joints", _freeze(joints))

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    def positions(self) -> np.ndarray:
        """T x J x 3 view of the (x, y, z) coordinates."""
        return self.joints[:, :, :3]


@dataclass(frozen=True)
class ActionSample:
    """A labelled clip: metadata plus its depth and/or skeleton modalities."""

    sample_id: str
    class_label: int
    subject_id: int
    view_id: int = 0
    depth: Optional[DepthSequence] = None
    skeleton: Optional[SkeletonSequence] = None

    def __post_init__(self):
        if self.class_label < 0 or self.subject_id < 0 or self.view_id < 0:
            raise ValueError("class_label, subject_id and view_id must be >= 0")
        if self.depth is None and self.skeleton is None:
            raise ValueError(f"sample {self.sample_id!r} has neither depth nor skeleton data")
        if self.depth is not None and self.skeleton is not None:
            if self.depth.num_frames != self.skeleton.num_frames:
                raise ValueError(
                    f"sample {self.sample_id!r}: depth has {self.depth.num_frames} frames "
                    f"but skeleton has {self.skeleton.num_frames}"
                )


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class FeatureLayout:
    """Named contiguous segments of a concatenated feature vector."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("layout needs at least one segment")
        expect = 0
        for seg in self.segments:
            if seg.name not in COMPONENT_ORDER:
                raise ValueError(f"unknown segment name {seg.name!r}")
            if seg.offset != expect:
                raise ValueError(f"segment {seg.name} at offset {seg.offset}, expected {expect}")
            if seg.length < 1:
                raise ValueError(f"segment {seg.name} has non-positive length {seg.length}")
            expect = seg.offset + seg.length
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def total_length(self) -> int:
        last = self.segments[-1]
        return last.offset + last.length

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(seg.name for seg in self.segments)

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"no segment named {name!r} in layout {self.names}")

    def slice_of(self, name: str) -> slice:
        seg = self.segment(name)
        return slice(seg.offset, seg.offset + seg.length)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("feature values must be a flat vector")
        if values.size != self.layout.total_length:
            raise ValueError(
                f"feature vector has {values.size} entries, layout expects {self.layout.total_length}"
            )
        if not np.isfinite(values).all():
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", _freeze(values))

    def segment_values(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice_of(name)]


@dataclass(frozen=True)
class HdgConfig:
    """Knobs of the four descriptor families.

    Per-segment lengths are fully determined here (given the joint count):

    * hod:  nx * ny * nt * hod_bins
    * hodg: nx * ny * nt * (bx + by + bt)
    * jpd:  3 * jpd_bins_per_component
    * jmv:  J * 6 * cx * cy * ct
    """

    grid: tuple[int, int, int] = (10, 10, 5)
    hod_bins: int = 5
    hodg_bins_per_channel: tuple[int, int, int] = (7, 7, 6)
    jpd_bins_per_component: int = 50
    jmv_cells: tuple[int, int, int] = (1, 1, 5)
    components: frozenset[str] = frozenset(COMPONENT_ORDER)

    def __post_init__(self):
        grid = tuple(int(v) for v in self.grid)
        hodg_bins = tuple(int(v) for v in self.hodg_bins_per_channel)
        cells = tuple(int(v) for v in self.jmv_cells)
        if len(grid) != 3 or len(hodg_bins) != 3 or len(cells) != 3:
            raise ValueError("grid, hodg_bins_per_channel and jmv_cells must be 3-tuples")
        counts = grid + hodg_bins + cells + (int(self.hod_bins), int(self.jpd_bins_per_component))
        if any(c < 1 for c in counts):
            raise ValueError("all grid/bin/cell counts must be >= 1")
        components = frozenset(self.components)
        if not components:
            raise ValueError("at least one feature component must be enabled")
        unknown = components - set(COMPONENT_ORDER)
        if unknown:
            raise ValueError(f"unknown components: {sorted(unknown)}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "hod_bins", int(self.hod_bins))
        object.__setattr__(self, "hodg_bins_per_channel", hodg_bins)
        object.__setattr__(self, "jpd_bins_per_component", int(self.jpd_bins_per_component))
        object.__setattr__(self, "jmv_cells", cells)
        object.__setattr__(self, "components", components)

    def with_components(self, components) -> "HdgConfig":
        return replace(self, components=frozenset(components))

    def ordered_components(self) -> tuple[str, ...]:
        return tuple(name for name in COMPONENT_ORDER if name in self.components)

    def segment_length(self, name: str, num_joints: int) -> int:
        nx, ny, nt = self.grid
        if name == "hod":
            return nx * ny * nt * self.hod_bins
        if name == "hodg":
            return nx * ny * nt * sum(self.hodg_bins_per_channel)
        if name == "jpd":
            return 3 * self.jpd_bins_per_component
        if name == "jmv":
            cx, cy, ct = self.jmv_cells
            return num_joints * 6 * cx * cy * ct
        raise ValueError(f"unknown segment name {name!r}")


def msr_compat_config(components=COMPONENT_ORDER) -> HdgConfig:
    """The published desk setup: 10x10x5 subvolumes, 5 depth bins, 20 derivative
    bins per subvolume as (7, 7, 6), 50 offset bins per axis, 1x1x5 joint cells.

    With 20 joints this yields segment lengths 2500 / 10000 / 600 / 150.
    """
    return HdgConfig(components=frozenset(components))


@dataclass(frozen=True)
class HyperParams:
    """Settings of the two-forest train pipeline."""

    pruning_trees: int = 130
    classifier_trees: int = 128
    alpha: float = 3.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.pruning_trees < 1 or self.classifier_trees < 1:
            raise ValueError("tree counts must be >= 1")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")


def layout_from_config(config: HdgConfig, num_joints: int) -> FeatureLayout:
    """Segment table for the enabled components, in canonical order."""
    if num_joints < 1:
        raise ValueError("num_joints must be >= 1")
    segments = []
    offset = 0
    for name in config.ordered_components():
        length = config.segment_length(name, num_joints)
        segments.append(Segment(name, offset, length))
        offset += length
    return FeatureLayout(tuple(segments))
