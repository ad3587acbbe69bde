"""Dataset containers, CSV I/O, standardization and synthetic generators."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from clvm.errors import DimensionError, ParseError
from clvm.num_core import RngStream, as_stream

MISSING = np.nan
OUTLIER_LABEL = -1


@dataclass(frozen=True)
class ContrastivePair:
    """A target set and a background set sharing the same feature columns.

    Missing cells hold NaN in the value matrices, but consumers must branch
    on the masks (``True`` means observed), never on the sentinel.
    """

    target: np.ndarray
    background: np.ndarray
    target_mask: np.ndarray = None
    background_mask: np.ndarray = None
    target_labels: np.ndarray | None = None
    background_labels: np.ndarray | None = None
    columns: tuple | None = None

    def __post_init__(self):
        tgt = np.array(self.target, dtype=np.float64)
        bg = np.array(self.background, dtype=np.float64)
        if tgt.ndim != 2 or bg.ndim != 2:
            raise DimensionError("target and background must be 2-D")
        if tgt.shape[0] < 1 or bg.shape[0] < 1:
            raise DimensionError("both sets need at least one row")
        if tgt.shape[1] != bg.shape[1]:
            raise DimensionError(f"feature counts differ: {tgt.shape[1]} vs {bg.shape[1]}")
        tmask = _resolve_mask(tgt, self.target_mask)
        bmask = _resolve_mask(bg, self.background_mask)
        tgt[~tmask] = MISSING
        bg[~bmask] = MISSING
        for name, arr in (("target", tgt), ("background", bg)):
            if not np.all(np.isfinite(arr[~np.isnan(arr)])):
                raise DimensionError(f"{name} has infinite entries")
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "target_mask", tmask)
        object.__setattr__(self, "background_mask", bmask)
        for attr, n in (("target_labels", tgt.shape[0]), ("background_labels", bg.shape[0])):
            lab = getattr(self, attr)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64).ravel()
                if lab.size != n:
                    raise DimensionError(f"{attr} has {lab.size} entries for {n} rows")
                object.__setattr__(self, attr, lab)
        for arr in (tgt, bg, tmask, bmask):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.target.shape[0]

    @property
    def m(self):
        return self.background.shape[0]

    @property
    def d(self):
        return self.target.shape[1]

    @property
    def has_missing(self):
        return not (self.target_mask.all() and self.background_mask.all())

    def filled(self, value=0.0):
        """Copies of the two matrices with missing cells set to ``value``."""
        t = np.where(self.target_mask, self.target, value)
        b = np.where(self.background_mask, self.background, value)
        return t, b


def _resolve_mask(values, mask):
    if mask is None:
        return ~np.isnan(values)
    mask = np.array(mask, dtype=bool)
    if mask.shape != values.shape:
        raise DimensionError(f"mask shape {mask.shape} != data shape {values.shape}")
    return mask & ~np.isnan(values)


# ---------------------------------------------------------------- CSV I/O


def load_csv(path, missing_tokens=("", "NA", "NaN", "nan")):
    """Read a numeric CSV with a header row.

    Returns ``(values, mask, header)``. Cells equal to one of
    ``missing_tokens`` (after stripping whitespace) are missing.
    """
    missing = set(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        width = len(header)
        rows, masks = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            vals, obs = [], []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell in missing:
                    vals.append(MISSING)
                    obs.append(False)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col + 1}"
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: non-finite cell at row {lineno}, column {col + 1}")
                vals.append(v)
                obs.append(True)
            rows.append(vals)
            masks.append(obs)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    mask = np.array(masks, dtype=bool).reshape(len(rows), width)
    return values, mask, header


def format_float(v):
    return repr(float(v))


def write_csv(path, values, mask=None, header=None):
    """Write a matrix with a header row; masked-out cells become empty."""
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = ~np.isnan(values)
    if header is None:
        header = [f"f{j + 1}" for j in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, obs in zip(values, mask):
            w.writerow([format_float(v) if o else "" for v, o in zip(row, obs)])


def load_labels(path):
    values, mask, header = load_csv(path)
    if not mask.all():
        raise ParseError(f"{path}: labels may not be missing")
    col = header.index("label") if "label" in header else values.shape[1] - 1
    return values[:, col].astype(np.int64)


def write_labels(path, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])


def load_pair(target_path, background_path, target_labels=None, background_labels=None):
    tgt, tmask, theader = load_csv(target_path)
    bg, bmask, bheader = load_csv(background_path)
    if len(theader) != len(bheader):
        raise ParseError(f"column counts differ: {len(theader)} vs {len(bheader)}")
    tl = load_labels(target_labels) if target_labels else None
    bl = load_labels(background_labels) if background_labels else None
    return ContrastivePair(tgt, bg, tmask, bmask, tl, bl, columns=tuple(theader))


# --------------------------------------------------------- standardization


@dataclass(frozen=True)
class ScalingParams:
    mode: str
    center: np.ndarray
    scale: np.ndarray
    flagged: tuple = field(default_factory=tuple)

    def apply(self, values):
        return (values - self.center) / self.scale

    def invert(self, values):
        return values * self.scale + self.center

    def to_dict(self):
        return {
            "mode": self.mode,
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "flagged": list(self.flagged),
        }


def standardize(pair, mode="zscore"):
    """Center or z-score columns using observed entries of both sets pooled.

    Columns with zero variance under ``zscore`` keep scale 1 and are listed in
    ``ScalingParams.flagged`` (a warning is also emitted).
    """
    d = pair.d
    if mode == "none":
        return pair, ScalingParams("none", np.zeros(d), np.ones(d))
    if mode not in ("center", "zscore"):
        raise ValueError(f"unknown standardization mode {mode!r}")
    values = np.vstack([pair.target, pair.background])
    mask = np.vstack([pair.target_mask, pair.background_mask])
    counts = mask.sum(axis=0)
    if np.any(counts == 0):
        raise DimensionError("a column has no observed entries")
    filled = np.where(mask, values, 0.0)
    center = filled.sum(axis=0) / counts
    scale = np.ones(d)
    flagged = []
    if mode == "zscore":
        if np.any(counts < 2):
            raise DimensionError("zscore needs at least two observed entries per column")
        dev = np.where(mask, values - center, 0.0)
        var = (dev * dev).sum(axis=0) / (counts - 1)
        for j in range(d):
            if var[j] <= 1e-24 * max(1.0, center[j] ** 2):
                flagged.append(j)
            else:
                scale[j] = math.sqrt(var[j])
        if flagged:
            warnings.warn(f"zero-variance columns left unscaled: {flagged}", RuntimeWarning)
    params = ScalingParams(mode, center, scale, tuple(flagged))
    out = replace(
        pair,
        target=np.where(pair.target_mask, params.apply(np.where(pair.target_mask, pair.target, 0.0)), MISSING),
        background=np.where(
            pair.background_mask, params.apply(np.where(pair.background_mask, pair.background, 0.0)), MISSING
        ),
    )
    return out, params


# ------------------------------------------------------ synthetic recipes

# (mean, std) per feature block for each target subgroup and the background.
SUBGROUP_BLOCKS = {
    "A": ((0.0, 1.0), (0.0, 1.0), (0.0, 10.0)),
    "B": ((0.0, 1.0), (3.0, 1.0), (0.0, 10.0)),
    "C": ((6.0, 1.0), (0.0, 1.0), (0.0, 10.0)),
    "D": ((6.0, 1.0), (3.0, 1.0), (0.0, 10.0)),
}
BACKGROUND_BLOCKS = ((0.0, 3.0), (0.0, 1.0), (0.0, 10.0))
BLOCK_WIDTH = 10


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_subgroup: int = 100
    m_background: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.n_per_subgroup < 1 or self.m_background < 1:
            raise ValueError("sample counts must be positive")


def _draw_blocks(rng, count, blocks):
    cols = [rng.normal(size=(count, BLOCK_WIDTH), loc=mu, scale=sd) for mu, sd in blocks]
    return np.hstack(cols)


def generate_synthetic_subgroups(n_per_subgroup=100, m_background=400, seed=0):
    """Four target subgroups that differ only in features 1-20, plus a background.

    Features 21-30 are high-variance noise shared by every row. Target
    labels are 0..3 for subgroups A..D.
    """
    if isinstance(seed, RngStream):
        spec, rng = SyntheticSpec(n_per_subgroup, m_background, seed.seed), seed
    else:
        spec = SyntheticSpec(n_per_subgroup, m_background, seed)
        rng = RngStream(spec.seed)
    parts, labels = [], []
    for lab, key in enumerate("ABCD"):
        parts.append(_draw_blocks(rng, spec.n_per_subgroup, SUBGROUP_BLOCKS[key]))
        labels.append(np.full(spec.n_per_subgroup, lab))
    bg = _draw_blocks(rng, spec.m_background, BACKGROUND_BLOCKS)
    return ContrastivePair(
        np.vstack(parts),
        bg,
        target_labels=np.concatenate(labels),
        background_labels=np.zeros(spec.m_background, dtype=np.int64),
    )


def generate_from_model(params, cluster_means_in_t, n, m, seed=0, cluster_std=1.0):
    """Sample a pair from the linear-Gaussian model with clustered target latents.

    Target row ``i`` belongs to cluster ``i % C``; its target latent is drawn
    from ``N(cluster_means_in_t[c], cluster_std^2 I)``.
    """
    means = np.atleast_2d(np.asarray(cluster_means_in_t, dtype=np.float64))
    S, W = params.S, params.W
    d, k = S.shape
    t = W.shape[1]
    if means.shape[1] != t:
        raise DimensionError(f"cluster means have width {means.shape[1]}, W has {t} columns")
    rng = as_stream(seed)
    labels = np.arange(n) % means.shape[0]
    sigma = math.sqrt(params.sigma2)
    t_lat = means[labels] + cluster_std * rng.standard_normal((n, t))
    z_tgt = rng.standard_normal((n, k))
    z_bg = rng.standard_normal((m, k))
    x = z_tgt @ S.T + t_lat @ W.T + params.mu_x + sigma * rng.standard_normal((n, d))
    y = z_bg @ S.T + params.mu_y + sigma * rng.standard_normal((m, d))
    return ContrastivePair(x, y, target_labels=labels, background_labels=np.zeros(m, dtype=np.int64))


def inject_outliers(pair, count_per_set=20, lower=-20.0, upper=20.0, seed=0):
    """Append ``count_per_set`` uniform rows to each set, labelled ``OUTLIER_LABEL``."""
    if lower > upper:
        raise ValueError("lower bound exceeds upper bound")
    if count_per_set == 0:
        return pair
    rng = as_stream(seed)
    extra_t = rng.uniform(lower, upper, size=(count_per_set, pair.d))
    extra_b = rng.uniform(lower, upper, size=(count_per_set, pair.d))
    ones = np.ones((count_per_set, pair.d), dtype=bool)

    def labels(existing, n):
        base = existing if existing is not None else np.zeros(n, dtype=np.int64)
        return np.concatenate([base, np.full(count_per_set, OUTLIER_LABEL)])

    return ContrastivePair(
        np.vstack([pair.target, extra_t]),
        np.vstack([pair.background, extra_b]),
        np.vstack([pair.target_mask, ones]),
        np.vstack([pair.background_mask, ones]),
        labels(pair.target_labels, pair.n),
        labels(pair.background_labels, pair.m),
        pair.columns,
    )


def delete_target_cells(pair, fraction, seed=0):
    """Mark a uniformly random ``fraction`` of target cells as missing.

    Rows are never emptied completely: one random cell of a fully deleted row
    is restored.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    rng = as_stream(seed)
    mask = pair.target_mask.copy()
    observed = np.flatnonzero(mask.ravel())
    k = int(round(fraction * mask.size))
    k = min(k, observed.size)
    drop = rng.choice(observed, size=k, replace=False)
    flat = mask.ravel()
    flat[drop] = False
    mask = flat.reshape(mask.shape)
    for i in np.flatnonzero(~mask.any(axis=1)):
        mask[i, rng.integers(0, pair.d)] = True
    return replace(pair, target_mask=mask)
