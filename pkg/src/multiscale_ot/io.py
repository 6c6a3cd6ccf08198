"""Plain-text readers and writers.

Formats (whitespace separated, ``#`` starts a comment, blank lines ignored):

point cloud
    one atom per line, ``weight c_1 ... c_D``; D is fixed by the first line.
fibers
    blocks that start with ``fiber <n_points>`` followed by ``n_points``
    lines ``x y z``.
density
    header ``density nx ny nz voxel_mm ox oy oz`` then one ``i j k value``
    line per nonzero voxel.
labels
    ``atom_index class_name`` per atlas atom, every index exactly once.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np

from .labeling import OUTLIER, LabelSet
from .measures import DensityMap, DiscreteMeasure


class ParseError(ValueError):
    """Malformed input file; the message carries the path and line number."""

    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


def _lines(path) -> Iterator[Tuple[int, List[str]]]:
    with open(path, encoding="utf-8") as fh:
        for num, raw in enumerate(fh, 1):
            toks = raw.split("#", 1)[0].split()
            if toks:
                yield num, toks


def _floats(path, num, toks):
    try:
        vals = [float(t) for t in toks]
    except ValueError:
        raise ParseError(path, num, f"expected numbers, got {' '.join(toks)!r}") from None
    if not all(np.isfinite(vals)):
        raise ParseError(path, num, "non-finite value")
    return vals


def _int(path, num, tok, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, num, f"{what} must be an integer, got {tok!r}") from None


def read_points(path) -> DiscreteMeasure:
    """Read a weighted point cloud."""
    w, pts, dim = [], [], None
    for num, toks in _lines(path):
        vals = _floats(path, num, toks)
        if dim is None:
            if len(vals) < 2:
                raise ParseError(path, num, "need a weight and at least one coordinate")
            dim = len(vals) - 1
        elif len(vals) != dim + 1:
            raise ParseError(path, num, f"expected {dim + 1} values, got {len(vals)}")
        if vals[0] < 0:
            raise ParseError(path, num, "negative weight")
        w.append(vals[0])
        pts.append(vals[1:])
    if not pts:
        raise ParseError(path, 0, "no atoms")
    if sum(w) <= 0:
        raise ParseError(path, 0, "total mass is zero")
    return DiscreteMeasure(np.array(pts), np.array(w))


def write_points(path, m: DiscreteMeasure) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# weight followed by {m.dim} coordinates\n")
        for w, x in zip(m.weights, m.points):
            fh.write(" ".join(repr(float(v)) for v in (w, *x)) + "\n")


def read_fibers(path) -> List[np.ndarray]:
    """Read polylines; returns a list of (n_i, 3) arrays in file order."""
    fibers: List[np.ndarray] = []
    cur, want, start = [], 0, 0
    for num, toks in _lines(path):
        if toks[0] == "fiber":
            if want:
                raise ParseError(path, num, f"fiber starting at line {start} has only {len(cur)} of {want} points")
            if len(toks) != 2:
                raise ParseError(path, num, "header must be 'fiber <n_points>'")
            want = _int(path, num, toks[1], "n_points")
            if want < 2:
                raise ParseError(path, num, "a fiber needs at least 2 points")
            cur, start = [], num
            continue
        if not want:
            raise ParseError(path, num, "point outside a 'fiber' block")
        vals = _floats(path, num, toks)
        if len(vals) != 3:
            raise ParseError(path, num, f"expected 'x y z', got {len(vals)} values")
        cur.append(vals)
        if len(cur) == want:
            fibers.append(np.array(cur))
            want = 0
    if want:
        raise ParseError(path, start, f"fiber has only {len(cur)} of {want} points")
    if not fibers:
        raise ParseError(path, 0, "no fibers")
    return fibers


def write_fibers(path, fibers) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fibers:
            f = np.asarray(f, dtype=float)
            fh.write(f"fiber {f.shape[0]}\n")
            for p in f:
                fh.write(" ".join(repr(float(v)) for v in p[:3]) + "\n")


def read_density(path) -> DensityMap:
    header = None
    ijk, vals = [], []
    for num, toks in _lines(path):
        if header is None:
            if toks[0] != "density" or len(toks) != 8:
                raise ParseError(path, num, "header must be 'density nx ny nz voxel_mm ox oy oz'")
            shape = [_int(path, num, t, "grid size") for t in toks[1:4]]
            voxel, *origin = _floats(path, num, toks[4:])
            if min(shape) < 1 or voxel <= 0:
                raise ParseError(path, num, "grid sizes and voxel size must be positive")
            header = (shape, voxel, origin)
            continue
        if len(toks) != 4:
            raise ParseError(path, num, "expected 'i j k value'")
        idx = [_int(path, num, t, "voxel index") for t in toks[:3]]
        if any(not 0 <= i < s for i, s in zip(idx, header[0])):
            raise ParseError(path, num, f"voxel index {tuple(idx)} outside the grid")
        (v,) = _floats(path, num, toks[3:])
        if v < 0:
            raise ParseError(path, num, "negative density")
        ijk.append(idx)
        vals.append(v)
    if header is None:
        raise ParseError(path, 0, "missing density header")
    shape, voxel, origin = header
    if not any(v > 0 for v in vals):
        raise ParseError(path, 0, "density map has no nonzero voxel")
    return DensityMap.from_sparse(shape, voxel, origin, np.array(ijk), np.array(vals))


def write_density(path, d: DensityMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        nx, ny, nz = d.shape
        ox, oy, oz = d.origin
        fh.write(f"density {nx} {ny} {nz} " + " ".join(repr(float(v)) for v in (d.voxel_size, ox, oy, oz)) + "\n")
        for i, j, k in np.argwhere(d.values > 0):
            fh.write(f"{i} {j} {k} {float(d.values[i, j, k])!r}\n")


def read_labels(path, n_atoms: int) -> LabelSet:
    """Read ``atom_index class_name`` lines covering atoms ``0..n_atoms-1``."""
    names = [None] * n_atoms
    for num, toks in _lines(path):
        if len(toks) != 2:
            raise ParseError(path, num, "expected 'atom_index class_name'")
        i = _int(path, num, toks[0], "atom_index")
        if not 0 <= i < n_atoms:
            raise ParseError(path, num, f"atom index {i} outside [0, {n_atoms})")
        if names[i] is not None:
            raise ParseError(path, num, f"atom {i} labeled twice")
        if toks[1] == "OUTLIER":
            raise ParseError(path, num, "'OUTLIER' is reserved")
        names[i] = toks[1]
    missing = [i for i, n in enumerate(names) if n is None]
    if missing:
        raise ParseError(path, 0, f"{len(missing)} atlas atoms have no label (first: {missing[0]})")
    return LabelSet.from_names(names)


def write_labels(path, labels: LabelSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, k in enumerate(labels.assignments):
            fh.write(f"{i} {labels.names[k]}\n")


def format_assignments(hard, confidence, row_mass, names) -> Iterator[str]:
    """Lines ``index label_or_OUTLIER confidence row_mass``."""
    for i, (k, c, r) in enumerate(zip(hard, confidence, row_mass)):
        name = "OUTLIER" if k == OUTLIER else names[k]
        yield f"{i} {name} {c:.6f} {r:.6g}"


def read_assignments(path):
    """Inverse of :func:`format_assignments`: (names per atom, confidence, row_mass)."""
    names, conf, mass = [], [], []
    for num, toks in _lines(path):
        if len(toks) != 4:
            raise ParseError(path, num, "expected 'index label confidence row_mass'")
        names.append(toks[1])
        c, r = _floats(path, num, toks[2:])
        conf.append(c)
        mass.append(r)
    return names, np.array(conf), np.array(mass)


def check_readable(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p
