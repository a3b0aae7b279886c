"""Multi-channel material stacks and their on-disk form.

A material is a set of co-registered maps (albedo, normal, roughness, ...)
flattened into one H x W x n array of values in [0, 1]. Per-map image files
are tied together by a JSON manifest; see docs/FORMATS.md for the schema.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

log = logging.getLogger(__name__)

__all__ = [
    "ChannelLayout",
    "ManifestEntry",
    "ManifestError",
    "MaterialManifest",
    "MaterialStack",
    "apply_triplet",
    "load_material",
    "save_material",
]

_RESERVED_MANIFEST_KEYS = ("size", "bit_depth", "output_dir")
_MAX_VALUE = {8: 255, 16: 65535}


class ManifestError(ValueError):
    """A manifest or material file violates the documented contract."""


@dataclass(frozen=True)
class ChannelLayout:
    """Ordered list of (role name, channel count) pairs composing a stack.

    Role names are unique and non-empty; each role holds 1 or 3 scalar
    planes (grayscale maps and RGB-like maps respectively).
    """

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("layout needs at least one role")
        seen: set[str] = set()
        for role, count in self.entries:
            if not role:
                raise ValueError("empty role name")
            if role in seen:
                raise ValueError(f"duplicate role name: {role!r}")
            if count not in (1, 3):
                raise ValueError(f"role {role!r}: channel count must be 1 or 3, got {count}")
            seen.add(role)

    @property
    def channels(self) -> int:
        """Total number of scalar planes n."""
        return sum(count for _, count in self.entries)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(role for role, _ in self.entries)

    def role_slice(self, role: str) -> slice:
        """Channel index range of ``role`` within the stack."""
        offset = 0
        for name, count in self.entries:
            if name == role:
                return slice(offset, offset + count)
            offset += count
        raise KeyError(role)

    @classmethod
    def flat(cls, channels: int, prefix: str = "ch") -> "ChannelLayout":
        """Anonymous layout of ``channels`` single-plane roles."""
        return cls(tuple((f"{prefix}{i}", 1) for i in range(channels)))


@dataclass(frozen=True)
class MaterialStack:
    """An H x W x n array of finite values in [0, 1] with a channel layout.

    The pixel data is copied and frozen on construction, so stacks behave
    as immutable values and are safe to share across threads.
    """

    data: np.ndarray
    layout: ChannelLayout

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"stack data must be H x W x n, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"stack needs at least one pixel, got shape {arr.shape}")
        if arr.shape[2] != self.layout.channels:
            raise ValueError(
                f"data has {arr.shape[2]} channels but layout declares {self.layout.channels}"
            )
        if not np.isfinite(arr).all():
            raise ValueError("stack contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("stack values must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, index: int) -> np.ndarray:
        """One scalar plane, shape (H, W)."""
        return self.data[:, :, index]

    def role(self, name: str) -> np.ndarray:
        """All planes of one role, shape (H, W, count)."""
        return self.data[:, :, self.layout.role_slice(name)]

    def tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Channels-first torch copy, shape (n, H, W)."""
        return torch.tensor(self.data.transpose(2, 0, 1), dtype=dtype)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, layout: ChannelLayout) -> "MaterialStack":
        """Build a stack from a channels-first (n, H, W) tensor in [0, 1]."""
        if tensor.ndim != 3:
            raise ValueError(f"expected (n, H, W) tensor, got shape {tuple(tensor.shape)}")
        arr = tensor.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)
        return cls(arr, layout)


@dataclass(frozen=True)
class ManifestEntry:
    """One role of a manifest: where its map lives and how many planes it has."""

    role: str
    path: Path
    channels: int


@dataclass(frozen=True)
class MaterialManifest:
    """Recipe tying per-role image files to a channel layout.

    ``size`` (H, W), when set, resamples every map to that size on load;
    without it all maps must already agree. ``bit_depth`` governs saving
    (8 or 16 bits per channel, lossless formats only).
    """

    entries: tuple[ManifestEntry, ...]
    bit_depth: int = 8
    size: tuple[int, int] | None = None
    output_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.bit_depth not in _MAX_VALUE:
            raise ManifestError(f"unsupported bit depth {self.bit_depth}, expected 8 or 16")
        if self.size is not None and (self.size[0] < 1 or self.size[1] < 1):
            raise ManifestError(f"invalid target size {self.size}")
        # Layout construction validates role names and channel counts.
        self.layout  # noqa: B018

    @property
    def layout(self) -> ChannelLayout:
        return ChannelLayout(tuple((e.role, e.channels) for e in self.entries))

    @classmethod
    def load(cls, path: str | Path) -> "MaterialManifest":
        """Parse a manifest JSON file; relative map paths resolve against it."""
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        try:
            raw = json.loads(path.read_text(), object_pairs_hook=_reject_duplicate_keys)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ManifestError(f"manifest {path} must be a JSON object")
        base = path.parent
        entries = []
        size = None
        bit_depth = 8
        output_dir = None
        for key, value in raw.items():
            if key == "size":
                if (
                    not isinstance(value, list)
                    or len(value) != 2
                    or not all(isinstance(v, int) for v in value)
                ):
                    raise ManifestError(f"manifest key 'size' must be [H, W], got {value!r}")
                size = (value[0], value[1])
            elif key == "bit_depth":
                if not isinstance(value, int):
                    raise ManifestError(f"manifest key 'bit_depth' must be an integer, got {value!r}")
                bit_depth = value
            elif key == "output_dir":
                output_dir = _resolve(base, str(value))
            else:
                if not isinstance(value, dict) or "path" not in value or "channels" not in value:
                    raise ManifestError(
                        f"role {key!r} must map to an object with 'path' and 'channels'"
                    )
                channels = value["channels"]
                if channels not in (1, 3):
                    raise ManifestError(f"role {key!r}: channels must be 1 or 3, got {channels!r}")
                entries.append(ManifestEntry(key, _resolve(base, str(value["path"])), channels))
        if not entries:
            raise ManifestError(f"manifest {path} declares no roles")
        return cls(tuple(entries), bit_depth=bit_depth, size=size, output_dir=output_dir)

    def save(self, path: str | Path) -> None:
        """Write the manifest back out as JSON."""
        path = Path(path)
        doc: dict[str, object] = {
            e.role: {"path": str(e.path), "channels": e.channels} for e in self.entries
        }
        if self.size is not None:
            doc["size"] = list(self.size)
        doc["bit_depth"] = self.bit_depth
        if self.output_dir is not None:
            doc["output_dir"] = str(self.output_dir)
        path.write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def for_layout(
        cls,
        layout: ChannelLayout,
        directory: str | Path,
        bit_depth: int = 8,
        extension: str = "png",
    ) -> "MaterialManifest":
        """Manifest addressing ``<directory>/<role>.<extension>`` per role."""
        directory = Path(directory)
        entries = tuple(
            ManifestEntry(role, directory / f"{role}.{extension}", count)
            for role, count in layout.entries
        )
        return cls(entries, bit_depth=bit_depth)


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in pairs:
        if key in out:
            raise ManifestError(f"duplicate manifest key: {key!r}")
        out[key] = value
    return out


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _read_image_unit(path: Path) -> np.ndarray:
    """Read a raster file to float64 in [0, 1], RGB order for color files."""
    if not path.exists():
        raise ManifestError(f"material map not found: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ManifestError(f"cannot decode image: {path}")
    if raw.dtype == np.uint8:
        scale = _MAX_VALUE[8]
    elif raw.dtype == np.uint16:
        scale = _MAX_VALUE[16]
    else:
        raise ManifestError(f"{path}: unsupported sample type {raw.dtype}, expected uint8 or uint16")
    if raw.ndim == 3 and raw.shape[2] == 4:
        log.warning("%s: dropping alpha plane", path)
        raw = raw[:, :, :3]
    if raw.ndim == 3 and raw.shape[2] == 3:
        raw = raw[:, :, ::-1]  # OpenCV decodes color files in BGR order
    return raw.astype(np.float64) / scale


def _write_image_unit(path: Path, plane: np.ndarray, bit_depth: int) -> None:
    """Quantize [0, 1] data to ``bit_depth`` and write a lossless raster file."""
    maxval = _MAX_VALUE[bit_depth]
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    quantized = np.floor(np.clip(plane, 0.0, 1.0) * maxval + 0.5).astype(dtype)
    if quantized.ndim == 3:
        quantized = quantized[:, :, ::-1]  # back to OpenCV's BGR order
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), quantized):
        raise OSError(f"failed to write image: {path}")


def load_material(manifest: MaterialManifest) -> MaterialStack:
    """Assemble a stack from the manifest's per-role files.

    Values are scaled to [0, 1] from the source bit depth and stacked in
    manifest order. A 3-channel file feeding a 1-channel role contributes
    its first plane (with a warning); maps of mismatched sizes are only
    accepted when the manifest sets a target size, in which case every map
    is resampled bilinearly.
    """
    planes: list[np.ndarray] = []
    sizes: dict[str, tuple[int, int]] = {}
    for entry in manifest.entries:
        img = _read_image_unit(entry.path)
        file_channels = 1 if img.ndim == 2 else img.shape[2]
        if entry.channels == 3:
            if file_channels != 3:
                raise ManifestError(
                    f"role {entry.role!r} expects 3 channels but {entry.path} has {file_channels}"
                )
        elif file_channels == 3:
            log.warning(
                "role %r: %s has 3 channels, taking the first plane", entry.role, entry.path
            )
            img = img[:, :, 0]
        if manifest.size is not None and img.shape[:2] != manifest.size:
            h, w = manifest.size
            img = np.clip(cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
        sizes[entry.role] = img.shape[:2]
        planes.append(img if img.ndim == 3 else img[:, :, None])
    if len(set(sizes.values())) > 1:
        raise ManifestError(
            "material maps disagree on size and the manifest sets no target size: "
            + ", ".join(f"{role}={h}x{w}" for role, (h, w) in sizes.items())
        )
    return MaterialStack(np.concatenate(planes, axis=2), manifest.layout)


def save_material(
    stack: MaterialStack, manifest: MaterialManifest, directory: str | Path | None = None
) -> list[Path]:
    """Write one image file per role; returns the paths written.

    Values are clamped to [0, 1] and quantized to the manifest bit depth
    (round half up), so a load of the saved files matches ``stack`` within
    one quantization step per value. ``directory`` (or the manifest's
    ``output_dir``) redirects files there, keeping their base names.
    """
    if stack.layout != manifest.layout:
        raise ManifestError(
            f"stack layout {stack.layout.entries} does not match manifest {manifest.layout.entries}"
        )
    target_dir = Path(directory) if directory is not None else manifest.output_dir
    written = []
    for entry in manifest.entries:
        data = stack.role(entry.role)
        if entry.channels == 1:
            data = data[:, :, 0]
        path = target_dir / entry.path.name if target_dir is not None else entry.path
        _write_image_unit(path, data, manifest.bit_depth)
        written.append(path)
    return written


def apply_triplet(stack: MaterialStack, triplet: Sequence[int]) -> np.ndarray:
    """Gather three channels of ``stack`` into an (H, W, 3) pseudo-RGB image.

    Pure index gather: output plane k is input channel ``triplet[k]``,
    repetition allowed. No value transformation is applied.
    """
    if len(triplet) != 3:
        raise ValueError(f"triplet must have 3 indices, got {len(triplet)}")
    n = stack.channels
    for c in triplet:
        if not 0 <= int(c) < n:
            raise IndexError(f"triplet index {c} out of range for {n} channels")
    return stack.data[:, :, list(triplet)].copy()
