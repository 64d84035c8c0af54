"""Frame-sequence container and its on-disk layout.

A sequence directory holds frame_000000.png, frame_000001.png, ... (8-bit
grayscale) plus meta.json with keys fps, width, height, fx, fy, cx, cy.
A ground-truth trajectory, when available, sits next to them as
groundtruth.txt in the trajectory text format. The same layout zipped flat
is the wire format served by video-generation endpoints.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .features import GrayImage
from .geom import CameraIntrinsics

META_NAME = "meta.json"
GROUNDTRUTH_NAME = "groundtruth.txt"
FRAME_PATTERN = "frame_{:06d}.png"


@dataclass
class FrameSequence:
    frames: list[GrayImage]
    fps: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    def timestamp(self, index: int) -> float:
        return index / self.fps

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.frames)) / self.fps


def _meta_dict(seq: FrameSequence) -> dict:
    k = seq.intrinsics
    return {
        "fps": seq.fps,
        "width": k.width,
        "height": k.height,
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
    }


def _intrinsics_from_meta(meta: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=float(meta["fx"]), fy=float(meta["fy"]),
            cx=float(meta["cx"]), cy=float(meta["cy"]),
            width=int(meta["width"]), height=int(meta["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad meta.json: {e}") from e


def save_sequence(seq: FrameSequence, directory, groundtruth_text: str | None = None) -> Path:
    """Write a sequence to a directory (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / META_NAME, "w") as f:
        json.dump(_meta_dict(seq), f, indent=2, sort_keys=True)
        f.write("\n")
    for i, frame in enumerate(seq.frames):
        Image.fromarray(frame.pixels, mode="L").save(
            directory / FRAME_PATTERN.format(i))
    if groundtruth_text is not None:
        (directory / GROUNDTRUTH_NAME).write_text(groundtruth_text)
    return directory


def load_sequence(directory) -> FrameSequence:
    """Read a sequence directory. Raises InputError on a malformed layout."""
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.is_file():
        raise InputError(f"missing {META_NAME} in {directory}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"unparseable {META_NAME}: {e}") from e
    k = _intrinsics_from_meta(meta)
    fps = float(meta.get("fps", 0.0))
    if fps <= 0:
        raise InputError("meta.json fps must be positive")
    frames = []
    i = 0
    while True:
        p = directory / FRAME_PATTERN.format(i)
        if not p.is_file():
            break
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        if arr.shape != (k.height, k.width):
            raise InputError(
                f"{p.name} is {arr.shape[1]}x{arr.shape[0]}, meta says "
                f"{k.width}x{k.height}")
        frames.append(GrayImage(arr))
        i += 1
    if not frames:
        raise InputError(f"no frames found in {directory}")
    return FrameSequence(frames, fps, k)


def load_groundtruth_text(directory) -> str | None:
    p = Path(directory) / GROUNDTRUTH_NAME
    return p.read_text() if p.is_file() else None


def pack_archive(seq: FrameSequence, groundtruth_text: str | None = None) -> bytes:
    """Zip a sequence flat (meta.json + frames at the archive root)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(META_NAME, json.dumps(_meta_dict(seq), indent=2,
                                          sort_keys=True) + "\n")
        for i, frame in enumerate(seq.frames):
            img_buf = io.BytesIO()
            Image.fromarray(frame.pixels, mode="L").save(img_buf, format="PNG")
            zf.writestr(FRAME_PATTERN.format(i), img_buf.getvalue())
        if groundtruth_text is not None:
            zf.writestr(GROUNDTRUTH_NAME, groundtruth_text)
    return buf.getvalue()


def unpack_archive(blob: bytes, directory) -> Path:
    """Extract an archived sequence into a directory and validate it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    try:
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            for name in zf.namelist():
                base = Path(name).name  # flatten, refuse traversal
                if not base or base != name:
                    raise InputError(f"unexpected archive member {name!r}")
                (directory / base).write_bytes(zf.read(name))
    except zipfile.BadZipFile as e:
        raise InputError(f"bad frame archive: {e}") from e
    return directory
