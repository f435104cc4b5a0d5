"""In-situ visualisation: per-rank column-max density profiles composited on rank 0."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import CompositingError
from .phase import Phase
from .steps import ActionRegistration, StepFilter

VIS_TAG = 2
ROOT = 0

# declared virtual compute costs (microseconds)
RENDER_US_PER_SITE = 0.6
COMPOSITE_US_PER_PIXEL = 0.05

_DTYPE = np.dtype("<f8")


@dataclass
class PartialImage:
    values: np.ndarray
    rank: int
    step_index: int

    @property
    def width(self) -> int:
        return len(self.values)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.values, dtype=_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, rank: int, step_index: int) -> "PartialImage":
        return cls(np.frombuffer(data, dtype=_DTYPE).copy(), rank, step_index)


def render_local(slab, rank: int = 0) -> PartialImage:
    """Column-wise maximum of density over the slab's fluid rows."""
    rows = slab.fluid_rows - 1
    if rows.size:
        values = slab.rho[rows].max(axis=0)
    else:
        values = np.zeros(slab.nx)
    return PartialImage(values, rank, slab.step)


def composite(partials, ranks=None) -> np.ndarray:
    """Element-wise maximum of one partial per rank.

    ``ranks`` is the set of ranks that must be present; it defaults to those
    given.
    """
    partials = list(partials)
    by_rank = {p.rank: p for p in partials}
    expected = sorted(by_rank) if ranks is None else sorted(ranks)
    for r in expected:
        if r not in by_rank:
            raise CompositingError(f"no partial image from rank {r}")
    if not expected:
        raise CompositingError("nothing to composite")
    steps = {by_rank[r].step_index for r in expected}
    widths = {by_rank[r].width for r in expected}
    if len(steps) > 1 or len(widths) > 1:
        raise CompositingError(f"partials disagree: steps {sorted(steps)}, widths {sorted(widths)}")
    image = by_rank[expected[0]].values.copy()
    for r in expected[1:]:
        np.maximum(image, by_rank[r].values, out=image)
    return image


def write_pgm(path, image) -> None:
    """Binary 16-bit PGM, one pixel row per image row, scaled so the maximum is 65535."""
    img = np.atleast_2d(np.asarray(image, dtype=float))
    top = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if top <= 0 else img / top * 65535.0
    pixels = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = data.split(maxsplit=4)
    if fields[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = np.frombuffer(fields[4], dtype=dtype)
    return pixels.reshape(h, w)


class ImageSink:
    """Collects composited images; writes ``img_<step>.pgm`` and a manifest when given a directory."""

    def __init__(self, directory=None):
        self.directory = directory
        self.images: list[tuple[int, np.ndarray]] = []
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    def emit(self, step: int, image: np.ndarray) -> None:
        self.images.append((step, image))
        if self.directory is not None:
            write_pgm(os.path.join(self.directory, f"img_{step}.pgm"), image)

    def close(self) -> None:
        if self.directory is not None:
            with open(os.path.join(self.directory, "manifest.txt"), "w") as fh:
                for step, _ in self.images:
                    fh.write(f"{step}\n")

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self.images]


class VisClient:
    """Renders on image steps; non-root ranks ship their partial to the root."""

    def __init__(self, slab, rank: int, world_size: int, step_filter: StepFilter,
                 sink: ImageSink | None = None):
        self.slab = slab
        self.rank = rank
        self.world_size = world_size
        self.step_filter = step_filter
        self.sink = sink if sink is not None else ImageSink()
        self._partial: PartialImage | None = None
        self._tickets: dict = {}

    def registrations(self) -> list[ActionRegistration]:
        slab = self.slab
        regs = [
            ActionRegistration(Phase.REQUEST_POSTING, self.render, self.step_filter,
                               declared_cost_us=slab.nx * slab.ny_local * RENDER_US_PER_SITE),
        ]
        if self.rank == ROOT:
            regs.append(ActionRegistration(
                Phase.POST_WAIT, self.composite, self.step_filter,
                declared_cost_us=slab.nx * self.world_size * COMPOSITE_US_PER_PIXEL,
            ))
        return regs

    def render(self, ctx) -> None:
        self._partial = render_local(self.slab, self.rank)
        if self.rank != ROOT:
            ctx.send(ROOT, VIS_TAG, self._partial.to_bytes())
            return
        nbytes = self.slab.nx * _DTYPE.itemsize
        self._tickets = {r: ctx.receive(r, VIS_TAG, nbytes) for r in range(self.world_size) if r != ROOT}

    def composite(self, ctx) -> None:
        step = self._partial.step_index
        partials = [self._partial]
        partials += [PartialImage.from_bytes(t.read(), r, step) for r, t in self._tickets.items()]
        self.sink.emit(ctx.step, composite(partials, range(self.world_size)))
